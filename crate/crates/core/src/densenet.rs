//! Single-view DenseNet classifier with a 1-channel input and 14 outputs.
//!
//! Layout: 7×7/2 stem convolution, norm, relu, 2×2 average pool; four dense
//! blocks separated by three transitions (norm, relu, 1×1 compression conv,
//! 2×2 average pool); final norm and relu; global average pool; a fully
//! connected head. Each dense layer is the bottleneck form
//! norm→relu→1×1 conv (4k)→norm→relu→3×3 conv (k).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{View, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Ctx, Linear, Mode};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Classifier, ModelInput};

pub const STEM_KERNEL: usize = 7;
pub const STEM_STRIDE: usize = 2;
pub const STEM_PAD: usize = 3;
pub const NUM_BLOCKS: usize = 4;

fn default_bottleneck() -> usize {
    4
}

/// Missing fields in a serialized config take the desk values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseNetConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
    pub transition_compression: f64,
    pub num_outputs: usize,
    /// Width of the 1×1 bottleneck as a multiple of the growth rate.
    #[serde(default = "default_bottleneck")]
    pub bottleneck_factor: usize,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenseNetConfig {
    /// DenseNet-121 widths: stem 64, growth 32, blocks [6, 12, 24, 16].
    pub fn densenet121() -> Self {
        DenseNetConfig {
            input_channels: 1,
            stem_channels: 64,
            growth_rate: 32,
            block_layers: vec![6, 12, 24, 16],
            transition_compression: 0.5,
            num_outputs: NUM_CLASSES,
            bottleneck_factor: 4,
        }
    }

    /// Small configuration that trains on a CPU in minutes.
    pub fn desk() -> Self {
        DenseNetConfig {
            input_channels: 1,
            stem_channels: 16,
            growth_rate: 8,
            block_layers: vec![2, 2, 2, 2],
            transition_compression: 0.5,
            num_outputs: NUM_CLASSES,
            bottleneck_factor: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_layers.len() != NUM_BLOCKS {
            return Err(Error::Config(format!(
                "DenseNet needs exactly {NUM_BLOCKS} blocks, got {}",
                self.block_layers.len()
            )));
        }
        if self.input_channels != 1 {
            return Err(Error::Config(format!(
                "input must be 1-channel grayscale, got {} channels",
                self.input_channels
            )));
        }
        if self.num_outputs != NUM_CLASSES {
            return Err(Error::Config(format!(
                "head must produce {NUM_CLASSES} outputs, got {}",
                self.num_outputs
            )));
        }
        if self.stem_channels == 0 || self.growth_rate == 0 || self.bottleneck_factor == 0 {
            return Err(Error::Config(
                "stem channels, growth rate and bottleneck factor must be positive".into(),
            ));
        }
        if self.block_layers.contains(&0) {
            return Err(Error::Config("every block needs at least one layer".into()));
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            return Err(Error::Config(format!(
                "transition compression must lie in (0, 1], got {}",
                self.transition_compression
            )));
        }
        if channel_arithmetic(self)
            .transitions
            .iter()
            .any(|t| t.1 == 0)
        {
            return Err(Error::Config(
                "a transition compresses to zero channels".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockChannels {
    pub input: usize,
    /// Input width seen by each layer: `input + i·k`.
    pub layer_inputs: Vec<usize>,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelTrace {
    pub stem: usize,
    pub blocks: Vec<BlockChannels>,
    /// `(input, output)` of each transition.
    pub transitions: Vec<(usize, usize)>,
    pub final_width: usize,
}

/// Channel widths through the network: a block adds `layers·k`, a transition
/// keeps `floor(compression · input)`.
pub fn channel_arithmetic(cfg: &DenseNetConfig) -> ChannelTrace {
    let k = cfg.growth_rate;
    let mut width = cfg.stem_channels;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    for (i, &layers) in cfg.block_layers.iter().enumerate() {
        let layer_inputs = (0..layers).map(|j| width + j * k).collect();
        let out = width + layers * k;
        blocks.push(BlockChannels {
            input: width,
            layer_inputs,
            output: out,
        });
        width = out;
        if i + 1 < cfg.block_layers.len() {
            let t = (cfg.transition_compression * width as f64).floor() as usize;
            transitions.push((width, t));
            width = t;
        }
    }
    ChannelTrace {
        stem: cfg.stem_channels,
        blocks,
        transitions,
        final_width: width,
    }
}

/// Spatial side after the stem and each transition, or `None` if some stage collapses.
pub fn spatial_trace(side: usize) -> Option<Vec<usize>> {
    let mut s = ConvGeom::out_dim(side, STEM_KERNEL, STEM_STRIDE, STEM_PAD)?;
    let mut out = vec![s];
    for _ in 0..NUM_BLOCKS {
        s /= 2;
        if s == 0 {
            return None;
        }
        out.push(s);
    }
    Some(out)
}

/// Smallest square side every stage can process.
pub fn min_input_side() -> usize {
    (1..)
        .find(|&s| spatial_trace(s).is_some())
        .expect("some side works")
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub in_channels: usize,
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.bn1.forward(ctx, x)?;
        let y = ctx.tape.relu(y);
        let y = self.conv1.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        self.conv2.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
}

impl DenseBlock {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for layer in &self.layers {
            let input = if features.len() == 1 {
                features[0]
            } else {
                ctx.tape.concat_axis1(&features)?
            };
            features.push(layer.forward(ctx, input)?);
        }
        ctx.tape.concat_axis1(&features)
    }
}

#[derive(Clone, Debug)]
struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

/// Everything up to and including global average pooling.
#[derive(Clone, Debug)]
pub struct DenseNetFeatures {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    pub blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm2d,
    pub feature_width: usize,
}

impl DenseNetFeatures {
    /// Adds the branch's tensors to `store` under `prefix`.
    pub fn build<T: Scalar>(
        cfg: &DenseNetConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let trace = channel_arithmetic(cfg);
        let k = cfg.growth_rate;
        let bottleneck = cfg.bottleneck_factor * k;
        let stem_conv = Conv2d::new(
            store,
            &format!("{prefix}stem.conv"),
            cfg.input_channels,
            cfg.stem_channels,
            STEM_KERNEL,
            STEM_STRIDE,
            STEM_PAD,
            false,
            rng,
        );
        let stem_bn = BatchNorm2d::new(store, &format!("{prefix}stem.bn"), cfg.stem_channels);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, bc) in trace.blocks.iter().enumerate() {
            let layers = bc
                .layer_inputs
                .iter()
                .enumerate()
                .map(|(li, &cin)| {
                    let name = format!("{prefix}block{bi}.layer{li}");
                    DenseLayer {
                        in_channels: cin,
                        bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), cin),
                        conv1: Conv2d::new(
                            store,
                            &format!("{name}.conv1"),
                            cin,
                            bottleneck,
                            1,
                            1,
                            0,
                            false,
                            rng,
                        ),
                        bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), bottleneck),
                        conv2: Conv2d::new(
                            store,
                            &format!("{name}.conv2"),
                            bottleneck,
                            k,
                            3,
                            1,
                            1,
                            false,
                            rng,
                        ),
                    }
                })
                .collect();
            blocks.push(DenseBlock { layers });
            if let Some(&(cin, cout)) = trace.transitions.get(bi) {
                let name = format!("{prefix}transition{bi}");
                transitions.push(Transition {
                    bn: BatchNorm2d::new(store, &format!("{name}.bn"), cin),
                    conv: Conv2d::new(
                        store,
                        &format!("{name}.conv"),
                        cin,
                        cout,
                        1,
                        1,
                        0,
                        false,
                        rng,
                    ),
                });
            }
        }
        let final_bn = BatchNorm2d::new(store, &format!("{prefix}final_bn"), trace.final_width);
        Ok(DenseNetFeatures {
            stem_conv,
            stem_bn,
            blocks,
            transitions,
            final_bn,
            feature_width: trace.final_width,
        })
    }

    /// `[b,1,h,w] → [b, feature_width]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let [_, c, h, w] = <[usize; 4]>::try_from(shape.as_slice())
            .map_err(|_| Error::Shape(format!("expected input [b,1,h,w], got {shape:?}")))?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "expected 1-channel grayscale input, got {c} channels"
            )));
        }
        if spatial_trace(h).is_none() || spatial_trace(w).is_none() {
            let m = min_input_side();
            return Err(Error::Shape(format!(
                "input {h}x{w} is too small: every side must be at least {m}"
            )));
        }
        let mut y = self.stem_conv.forward(ctx, x)?;
        y = self.stem_bn.forward(ctx, y)?;
        y = ctx.tape.relu(y);
        y = nn::avg_pool2d(ctx.tape, y)?;
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(ctx, y)?;
            if let Some(t) = self.transitions.get(i) {
                y = t.bn.forward(ctx, y)?;
                y = ctx.tape.relu(y);
                y = t.conv.forward(ctx, y)?;
                y = nn::avg_pool2d(ctx.tape, y)?;
            }
        }
        y = self.final_bn.forward(ctx, y)?;
        y = ctx.tape.relu(y);
        nn::global_avg_pool(ctx.tape, y)
    }
}

/// One view's classifier: DenseNet features plus a 14-way head.
#[derive(Clone, Debug)]
pub struct SingleViewModel<T> {
    pub cfg: DenseNetConfig,
    pub view: View,
    pub seed: u64,
    pub store: ParamStore<T>,
    pub features: DenseNetFeatures,
    head: Linear,
}

impl<T: Scalar> SingleViewModel<T> {
    pub fn build(cfg: &DenseNetConfig, view: View, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let features = DenseNetFeatures::build(cfg, &mut store, "", &mut rng)?;
        let head = Linear::new(
            &mut store,
            "head",
            features.feature_width,
            cfg.num_outputs,
            &mut rng,
        );
        let model = SingleViewModel {
            cfg: cfg.clone(),
            view,
            seed,
            store,
            features,
            head,
        };
        log::debug!(
            "built {} DenseNet with {} parameters",
            view,
            model.parameter_count()
        );
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn feature_width(&self) -> usize {
        self.features.feature_width
    }

    /// Logits `[b,14]` for `x: [b,1,h,w]`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut ctx = Ctx {
            tape,
            store: &mut self.store,
            bound,
            mode,
        };
        let f = self.features.forward(&mut ctx, x)?;
        self.head.forward(&mut ctx, f)
    }

    /// Eval-mode logits for a batch of images.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Classifier<T> for SingleViewModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn logits(
        &mut self,
        tape: &mut Tape<T>,
        bound: &Bound,
        input: &ModelInput<T>,
        mode: Mode,
    ) -> Result<Var> {
        match input {
            ModelInput::Single(x) => {
                let xv = tape.constant(x.clone());
                self.forward(tape, bound, xv, mode)
            }
            ModelInput::Pair { .. } => Err(Error::Pairing(
                "single-view model given a frontal/lateral pair".into(),
            )),
        }
    }
}
