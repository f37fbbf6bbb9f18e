//! Layers used by the DenseNet and DualNet builders.
//!
//! Layers hold [`ParamId`]s into a model's [`ParamStore`]; a forward pass runs
//! against a [`Ctx`] that carries the tape, the store and the tape handles of
//! the bound parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

use crate::tensor::{NormStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub bound: &'a Bound,
    pub mode: Mode,
}

impl<T: Scalar> Ctx<'_, T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

/// Convolution weights `[out_ch, in_ch, k, k]` with optional bias, stride and zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be ≥ 1");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let w = normal_tensor(
            &[out_channels, in_channels, kernel, kernel],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = with_bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_channels]), true));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        conv2d(ctx.tape, x, w, b, self.stride, self.pad)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros([channels]),
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones([channels]),
                false,
            ),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode reads the running estimates only.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        let eps = T::of(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, obs) = ctx.tape.batch_norm2d(x, g, b, NormStats::Batch { eps })?;
                let obs = obs.expect("batch statistics");
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                for (r, &o) in ctx
                    .store
                    .get_mut(self.running_mean)
                    .data_mut()
                    .iter_mut()
                    .zip(&obs.mean)
                {
                    *r = keep * *r + m * o;
                }
                for (r, &o) in ctx
                    .store
                    .get_mut(self.running_var)
                    .data_mut()
                    .iter_mut()
                    .zip(&obs.var)
                {
                    *r = keep * *r + m * o;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.get(self.running_mean).data().to_vec();
                let var = ctx.store.get(self.running_var).data().to_vec();
                let (y, _) = ctx.tape.batch_norm2d(
                    x,
                    g,
                    b,
                    NormStats::Running {
                        mean: &mean,
                        var: &var,
                        eps,
                    },
                )?;
                Ok(y)
            }
        }
    }
}

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Normal weights with `std = 1/sqrt(in)`, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (in_features.max(1) as f64).sqrt();
        let w = normal_tensor(&[in_features, out_features], std, rng);
        Linear {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([out_features]), true),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        linear(ctx.tape, x, w, b)
    }
}

pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    tape.conv2d(x, w, bias, stride, pad)
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.relu(x)
}

/// 2×2 stride-2 average pooling, as used by transitions and the stem.
pub fn avg_pool2d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.avg_pool2d(x, 2)
}

pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() == 4 && (s[2] == 0 || s[3] == 0) {
        return Err(Error::Shape("global_avg_pool on an empty map".into()));
    }
    tape.global_avg_pool(x)
}

/// `[b,da] ++ [b,dc] → [b,da+dc]`; `a` fills the leading columns.
pub fn concat_features<T: Scalar>(tape: &mut Tape<T>, a: Var, c: Var) -> Result<Var> {
    let (sa, sc) = (tape.shape(a).to_vec(), tape.shape(c).to_vec());
    if sa.len() != 2 || sc.len() != 2 {
        return Err(Error::Shape(format!(
            "concat_features expects [b,d] inputs, got {sa:?} and {sc:?}"
        )));
    }
    if sa[0] != sc[0] {
        return Err(Error::Shape(format!(
            "concat_features batch mismatch: {} vs {}",
            sa[0], sc[0]
        )));
    }
    tape.concat_axis1(&[a, c])
}

pub fn sigmoid_bce<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    tape.sigmoid_bce(logits, targets)
}
