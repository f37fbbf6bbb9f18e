//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op pushes one node holding its output value and the handles of its
//! inputs. Because nodes can only refer to earlier nodes, insertion order is a
//! topological order and `backward` is a single reverse sweep.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    ConcatAxis1 {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics to normalize with in [`Tape::batch_norm2d`].
pub enum NormStats<'a, T> {
    /// Compute mean/variance from the batch itself (training).
    Batch { eps: T },
    /// Use stored running estimates (evaluation).
    Running { mean: &'a [T], var: &'a [T], eps: T },
}

/// Batch statistics observed by a training-mode batch norm, for running-average updates.
#[derive(Clone, Debug)]
pub struct ObservedStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance.
    pub var: Vec<T>,
}

/// A recording of one forward computation. Confined to the thread that built it.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    relu_signature: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            relu_signature: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every relu's on/off pattern recorded so far. Two evaluations
    /// with the same signature lie on the same linear piece of the network.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(
            !inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) || value.is_finite(),
            "non-finite output from finite inputs in {op:?}"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// For ops whose output can overflow from finite inputs; reports instead of asserting.
    fn push_checked(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
        name: &str,
    ) -> Result<Var> {
        if !value.is_finite() && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            return Err(Error::Evaluation(format!(
                "{name} produced a non-finite value"
            )));
        }
        Ok(self.push(value, op, inputs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.zip_map(a, b, |x, y| x / y);
        self.push_checked(v, Op::Div(a, b), &[a, b], "div")
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::MulScalar(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let mut sig = self.relu_signature;
        for &x in self.value(a).data() {
            sig = (sig ^ u64::from(x > T::zero())).wrapping_mul(FNV_PRIME);
        }
        self.relu_signature = sig;
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        self.push_checked(v, Op::Exp(a), &[a], "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.ln());
        self.push_checked(v, Op::Ln(a), &[a], "ln")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2()?;
        let [k2, n] = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: [{m},{k}] · [{k2},{n}]"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[b,n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [rows, n] = self.value(x).dims2()?;
        let bt = self.value(bias);
        if bt.numel() != n {
            return Err(Error::Shape(format!(
                "bias of {} elements for rows of width {n}",
                bt.numel()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, &b) in out[r * n..(r + 1) * n].iter_mut().zip(bt.data()) {
                *o += b;
            }
        }
        let v = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(v, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Concatenation along axis 1 (features of `[b,d]`, or channels of `[b,c,h,w]`).
    pub fn concat_axis1(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero inputs".into()))?;
        let ref_shape = self.shape(first).to_vec();
        if ref_shape.len() < 2 {
            return Err(Error::Shape(format!(
                "concat needs rank ≥ 2, got {ref_shape:?}"
            )));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != ref_shape.len() || s[0] != ref_shape[0] || s[2..] != ref_shape[2..] {
                return Err(Error::Shape(format!(
                    "concat: shape {s:?} incompatible with {ref_shape:?} outside axis 1"
                )));
            }
            widths.push(s[1]);
        }
        let outer = ref_shape[0];
        let inner: usize = ref_shape[2..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * wd * inner..(o + 1) * wd * inner]);
            }
        }
        let mut shape = ref_shape;
        shape[1] = total;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::ConcatAxis1 {
                inputs: inputs.to_vec(),
                widths,
            },
            inputs,
        ))
    }

    /// Cross-correlation of `x[b,c,h,w]` with `w[oc,c,kh,kw]`, zero padding `pad`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [b, c, h, wd] = self.value(x).dims4()?;
        let [oc, ic, kh, kw] = self.value(w).dims4()?;
        if c != ic {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {ic}"
            )));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape("conv2d: stride and kernel must be ≥ 1".into()));
        }
        let (oh, ow) = match (
            ConvGeom::out_dim(h, kh, stride, pad),
            ConvGeom::out_dim(wd, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d: {h}x{wd} input too small for {kh}x{kw} kernel with padding {pad}"
                )))
            }
        };
        if let Some(bv) = bias {
            if self.value(bv).numel() != oc {
                return Err(Error::Shape(format!(
                    "conv2d: bias has {} entries for {oc} output channels",
                    self.value(bv).numel()
                )));
            }
        }
        let geom = ConvGeom {
            b,
            c,
            h,
            w: wd,
            oc,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|bv| self.value(bv).data()),
            &geom,
        );
        let v = Tensor::new(vec![b, oc, oh, ow], out)?;
        let mut ins = vec![x, w];
        ins.extend(bias);
        Ok(self.push(v, Op::Conv2d { x, w, bias, geom }, &ins))
    }

    /// Non-overlapping `k×k` average pool, stride `k`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if k == 0 || h < k || w < k {
            return Err(Error::Shape(format!(
                "avg_pool2d: {h}x{w} map too small for {k}x{k} window"
            )));
        }
        let out = kernels::avg_pool_forward(self.value(x).data(), b * c, h, w, k);
        let v = Tensor::new(vec![b, c, h / k, w / k], out)?;
        Ok(self.push(v, Op::AvgPool2d { x, k }, &[x]))
    }

    /// Spatial mean per channel: `[b,c,h,w] → [b,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let norm = T::one() / T::of(hw as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * norm)
            .collect();
        let v = Tensor::new(vec![b, c], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    /// Per-channel normalization of `x[b,c,h,w]` followed by `gamma·x̂ + beta`.
    ///
    /// With [`NormStats::Batch`] the returned statistics are the batch mean and
    /// unbiased variance, for updating running estimates.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<ObservedStats<T>>)> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "batch_norm2d: affine parameters do not match {c} channels"
            )));
        }
        let hw = h * w;
        let n = b * hw;
        let xd = self.value(x).data();
        let (mean, inv_std, observed, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        mean[ci] += plane.iter().copied().sum::<T>();
                    }
                }
                let nf = T::of(n as f64);
                mean.iter_mut().for_each(|m| *m /= nf);
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        let m = mean[ci];
                        var[ci] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                }
                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&s| T::one() / (s / nf + eps).sqrt())
                    .collect();
                let unbiased = if n > 1 {
                    var.iter().map(|&s| s / T::of((n - 1) as f64)).collect()
                } else {
                    vec![T::zero(); c]
                };
                let obs = ObservedStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, inv_std, Some(obs), true)
            }
            NormStats::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!(
                        "batch_norm2d: running statistics do not match {c} channels"
                    )));
                }
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let (m, is, gg, bb) = (mean[ci], inv_std[ci], g[ci], bt[ci]);
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xd[off..off + hw]) {
                    *o = gg * (v - m) * is + bb;
                }
            }
        }
        let v = Tensor::new(vec![b, c, h, w], out)?;
        let var = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((var, observed))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 `targets`,
    /// evaluated as `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "sigmoid_bce: logits {:?} vs targets {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        if let Some(bad) = targets
            .data()
            .iter()
            .find(|&&y| y != T::zero() && y != T::one())
        {
            return Err(Error::Validation(format!(
                "sigmoid_bce: target {bad} is not 0 or 1"
            )));
        }
        let total: T = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::of(z.numel() as f64);
        let v = Tensor::scalar(loss);
        Ok(self.push(
            v,
            Op::SigmoidBce {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| self.value(v);
        let like =
            |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data).expect("shape");
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let ga = gd.iter().zip(bd).map(|(&g, &y)| g * y).collect();
                let gb = gd.iter().zip(ad).map(|(&g, &x)| g * x).collect();
                self.accumulate(grads, *a, like(*a, ga));
                self.accumulate(grads, *b, like(*b, gb));
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let ga = gd.iter().zip(bd).map(|(&g, &y)| g / y).collect();
                let gb = gd
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                self.accumulate(grads, *a, like(*a, ga));
                self.accumulate(grads, *b, like(*b, gb));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, s) => self.accumulate(grads, *a, g.map(|x| x * *s)),
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Exp(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &e)| g * e)
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Ln(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| g / x)
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, Tensor::full(val(*a).shape().to_vec(), s));
            }
            Op::Mean(a) => {
                let s = gd[0] / T::of(val(*a).numel() as f64);
                self.accumulate(grads, *a, Tensor::full(val(*a).shape().to_vec(), s));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, like(*a, gd.to_vec())),
            Op::MatMul(a, b) => {
                let [m, k] = val(*a).dims2()?;
                let [_, n] = val(*b).dims2()?;
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_a_bt_acc(gd, val(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_at_b_acc(val(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let [rows, n] = g.dims2()?;
                let mut db = vec![T::zero(); n];
                for r in 0..rows {
                    for (d, &v) in db.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *bias, like(*bias, db));
            }
            Op::ConcatAxis1 { inputs, widths } => {
                let shape = g.shape();
                let outer = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &wd) in inputs.iter().zip(widths) {
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * wd * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[start..start + wd * inner]);
                        }
                        self.accumulate(grads, v, like(v, d));
                    }
                    offset += wd;
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let cg = kernels::conv2d_backward(
                    val(*x).data(),
                    val(*w).data(),
                    gd,
                    geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    bias.map(|b| self.requires_grad(b)).unwrap_or(false),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, like(*x, dx));
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, like(*w, dw));
                }
                if let (Some(b), Some(db)) = (bias, cg.dbias) {
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::AvgPool2d { x, k } => {
                let [b, c, h, w] = val(*x).dims4()?;
                let dx = kernels::avg_pool_backward(gd, b * c, h, w, *k);
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = val(*x).dims4()?;
                let hw = h * w;
                let norm = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(gd.len() * hw);
                for &v in gd {
                    dx.extend(std::iter::repeat_n(v * norm, hw));
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let [b, c, h, w] = val(*x).dims4()?;
                let hw = h * w;
                let n = T::of((b * hw) as f64);
                let xd = val(*x).data();
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for j in off..off + hw {
                            let xhat = (xd[j] - mean[ci]) * inv_std[ci];
                            dgamma[ci] += gd[j] * xhat;
                            dbeta[ci] += gd[j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            let (m, is, gg) = (mean[ci], inv_std[ci], gam[ci]);
                            for j in off..off + hw {
                                dx[j] = if *batch_stats {
                                    let xhat = (xd[j] - m) * is;
                                    gg * is / n * (n * gd[j] - dbeta[ci] - xhat * dgamma[ci])
                                } else {
                                    gd[j] * gg * is
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, like(*x, dx));
                }
                self.accumulate(grads, *gamma, like(*gamma, dgamma));
                self.accumulate(grads, *beta, like(*beta, dbeta));
            }
            Op::SigmoidBce { logits, targets } => {
                let z = val(*logits).data();
                let scale = gd[0] / T::of(z.len() as f64);
                let d = z
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                self.accumulate(grads, *logits, like(*logits, d));
            }
        }
        Ok(())
    }
}

/// Logistic function evaluated without overflow for large |x|.
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
