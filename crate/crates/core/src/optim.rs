//! Adam, the Triangular2 cyclic learning rate, and the learning-rate range test.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that updates a store from aligned gradients.
pub trait Optimizer<T: Scalar> {
    fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()>;
}

fn check_grads<T: Scalar>(store: &ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (e, g) in store.entries().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    e.name,
                    g.shape(),
                    e.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Optimizer(format!(
                    "non-finite gradient for parameter {}",
                    e.name
                )));
            }
        }
    }
    Ok(())
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| vec![T::zero(); if e.trainable { e.value.numel() } else { 0 }])
                .collect()
        };
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }
}

impl<T: Scalar> Optimizer<T> for AdamState<T> {
    fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        check_grads(store, grads)?;
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::Optimizer(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (i, (entry, g)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !entry.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, `p ← p − lr·g`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sgd;

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        check_grads(store, grads)?;
        let lr = T::of(lr);
        for (entry, g) in store.entries_mut().iter_mut().zip(grads) {
            if let (Some(g), true) = (g, entry.trainable) {
                for (p, &g) in entry.value.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * g;
                }
            }
        }
        Ok(())
    }
}

/// Triangular2 cyclic schedule between `base_lr` and `max_lr`; the amplitude halves every cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicLrConfig {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Iterations per half cycle.
    pub step_size: usize,
}

impl Default for CyclicLrConfig {
    fn default() -> Self {
        CyclicLrConfig {
            base_lr: 0.001,
            max_lr: 0.02,
            step_size: 2000,
        }
    }
}

impl CyclicLrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr < self.max_lr) {
            return Err(Error::Config(format!(
                "need 0 < base_lr < max_lr, got {} and {}",
                self.base_lr, self.max_lr
            )));
        }
        if self.step_size == 0 {
            return Err(Error::Config("step_size must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        lr_at(self, iter)
    }
}

pub fn lr_at(cfg: &CyclicLrConfig, iter: u64) -> f64 {
    let step = cfg.step_size as f64;
    let it = iter as f64;
    let cycle = (1.0 + it / (2.0 * step)).floor();
    let x = (it / step - 2.0 * cycle + 1.0).abs();
    let scale = 2f64.powf(cycle - 1.0);
    cfg.base_lr + (cfg.max_lr - cfg.base_lr) * (1.0 - x).max(0.0) / scale
}

/// A model whose loss and gradients can be evaluated repeatedly, for the range test.
pub trait Objective<T: Scalar>: Clone {
    fn store_mut(&mut self) -> &mut ParamStore<T>;

    /// Loss and store-aligned gradients for iteration `iter`.
    fn loss_and_grads(&mut self, iter: usize) -> Result<(f64, Vec<Option<Tensor<T>>>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RangePoint {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub smoothed_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeTestResult {
    pub suggested_base: f64,
    pub suggested_max: f64,
    pub diverged_at: Option<usize>,
    pub trace: Vec<RangePoint>,
}

pub const RANGE_SMOOTHING: f64 = 0.98;
pub const RANGE_DIVERGENCE_FACTOR: f64 = 2.0;

/// Sweeps the learning rate geometrically from `lr_min` to `lr_max` on a copy
/// of `model`, recording a bias-corrected exponential moving average of the
/// loss. Stops once the smoothed loss exceeds twice its best value; the
/// suggested maximum is the rate at the best smoothed loss, the base a tenth of it.
pub fn lr_range_test<T, M, O>(
    model: &M,
    mut optimizer: O,
    lr_min: f64,
    lr_max: f64,
    iters: usize,
) -> Result<RangeTestResult>
where
    T: Scalar,
    M: Objective<T>,
    O: Optimizer<T>,
{
    if !(lr_min > 0.0 && lr_min < lr_max) {
        return Err(Error::Config(format!(
            "need 0 < lr_min < lr_max, got {lr_min} and {lr_max}"
        )));
    }
    if iters < 2 {
        return Err(Error::Config(
            "range test needs at least 2 iterations".into(),
        ));
    }
    let mut probe = model.clone();
    let ratio = lr_max / lr_min;
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    let mut best_iter = 0;
    let mut trace = Vec::with_capacity(iters);
    let mut diverged_at = None;
    for i in 0..iters {
        let lr = lr_min * ratio.powf(i as f64 / (iters - 1) as f64);
        let (loss, grads) = probe.loss_and_grads(i)?;
        avg = RANGE_SMOOTHING * avg + (1.0 - RANGE_SMOOTHING) * loss;
        let smoothed = avg / (1.0 - RANGE_SMOOTHING.powi(i as i32 + 1));
        trace.push(RangePoint {
            iter: i,
            lr,
            loss,
            smoothed_loss: smoothed,
        });
        if !smoothed.is_finite() || (i > 0 && smoothed > RANGE_DIVERGENCE_FACTOR * best) {
            diverged_at = Some(i);
            break;
        }
        if smoothed < best {
            best = smoothed;
            best_iter = i;
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            diverged_at = Some(i);
            break;
        }
        optimizer.step(probe.store_mut(), &grads, lr)?;
    }
    if diverged_at.is_some() && best_iter == 0 {
        return Err(Error::Optimizer(format!(
            "loss diverged immediately from lr_min = {lr_min}; retry with a smaller lr_min"
        )));
    }
    let suggested_max = trace[best_iter].lr;
    Ok(RangeTestResult {
        suggested_base: suggested_max / 10.0,
        suggested_max,
        diverged_at,
        trace,
    })
}

/// Writes `iter,lr,smoothed_loss` rows.
pub fn write_range_csv<W: Write>(trace: &[RangePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "lr", "smoothed_loss"])?;
    for p in trace {
        w.write_record([
            p.iter.to_string(),
            format!("{:e}", p.lr),
            format!("{:e}", p.smoothed_loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_slice(v), true);
        s
    }

    #[test]
    fn triangular2_spot_values() {
        let cfg = CyclicLrConfig {
            base_lr: 0.001,
            max_lr: 0.02,
            step_size: 100,
        };
        assert!((lr_at(&cfg, 0) - 0.001).abs() < 1e-15);
        assert!((lr_at(&cfg, 100) - 0.02).abs() < 1e-15);
        assert!((lr_at(&cfg, 200) - 0.001).abs() < 1e-15);
        assert!((lr_at(&cfg, 300) - 0.0105).abs() < 1e-15);
        assert!((lr_at(&cfg, 500) - (0.001 + 0.019 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn cyclic_config_validation() {
        let bad = CyclicLrConfig {
            base_lr: 0.02,
            max_lr: 0.001,
            step_size: 10,
        };
        assert!(bad.validate().is_err());
        let bad = CyclicLrConfig {
            step_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut store = store_with(&[1.0, -2.0, 0.5]);
        let mut adam = AdamState::new(&store);
        let g = Tensor::from_slice(&[3.0, -0.25, 40.0]);
        adam.step(&mut store, &[Some(g)], 0.01).unwrap();
        let p = store.get(store.find("w").unwrap()).data();
        for (after, (before, sign)) in p.iter().zip([(1.0, 1.0), (-2.0, -1.0), (0.5, 1.0)]) {
            assert!((after - (before - 0.01 * sign)).abs() < 1e-8);
        }
        assert_eq!(adam.t, 1);
        assert!(adam.second_moments()[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = store_with(&[1.0, 2.0]);
        let before = store.clone();
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &[Some(Tensor::zeros([2]))], 0.1)
            .unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn adam_nan_gradient_names_parameter() {
        let mut store = store_with(&[1.0]);
        let mut adam = AdamState::new(&store);
        let err = adam
            .step(&mut store, &[Some(Tensor::from_slice(&[f64::NAN]))], 0.1)
            .unwrap_err();
        assert!(
            matches!(err, Error::Optimizer(ref m) if m.contains("w")),
            "{err}"
        );
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(w) = 0.5·(w − 3)²
        let mut store = store_with(&[0.0]);
        let mut adam = AdamState::new(&store);
        let loss = |w: f64| 0.5 * (w - 3.0) * (w - 3.0);
        let mut prev = loss(0.0);
        for _ in 0..2 {
            let w = store.entries()[0].value.data()[0];
            adam.step(&mut store, &[Some(Tensor::from_slice(&[w - 3.0]))], 0.1)
                .unwrap();
            let now = loss(store.entries()[0].value.data()[0]);
            assert!(now < prev);
            prev = now;
        }
    }

    #[derive(Clone)]
    struct Flat(ParamStore<f64>);

    impl Objective<f64> for Flat {
        fn store_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.0
        }
        fn loss_and_grads(&mut self, _: usize) -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
            Ok((1.5, vec![Some(Tensor::zeros([1]))]))
        }
    }

    #[test]
    fn range_test_on_flat_objective() {
        let model = Flat(store_with(&[0.0]));
        let r = lr_range_test(&model, Sgd, 1e-4, 1.0, 50).unwrap();
        assert_eq!(r.diverged_at, None);
        assert_eq!(r.trace.len(), 50);
        assert!(r
            .trace
            .iter()
            .all(|p| (p.smoothed_loss - 1.5).abs() < 1e-12));
    }

    #[test]
    fn range_csv_header() {
        let mut buf = Vec::new();
        let pts = [RangePoint {
            iter: 0,
            lr: 0.001,
            loss: 1.0,
            smoothed_loss: 1.0,
        }];
        write_range_csv(&pts, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("iter,lr,smoothed_loss\n0,"));
    }
}
