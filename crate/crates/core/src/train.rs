//! Datasets, the training loop and batch inference shared by all model kinds.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::{LabelVector, View, NUM_CLASSES};
use crate::dualnet::PairKind;
use crate::error::{Error, Result};
use crate::image::{load_image, transform_chain};
use crate::manifest::{Manifest, ManifestRow};
use crate::nn::Mode;
use crate::optim::{AdamState, CyclicLrConfig, Objective, Optimizer};
use crate::params::{Bound, ParamStore};
use crate::sampler::stratified_batches;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// A batch as fed to a model.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput<T> {
    /// `[b,1,h,w]`
    Single(Tensor<T>),
    Pair {
        frontal: Tensor<T>,
        lateral: Tensor<T>,
    },
}

impl<T: Scalar> ModelInput<T> {
    pub fn batch_size(&self) -> usize {
        match self {
            ModelInput::Single(x) => x.shape()[0],
            ModelInput::Pair { frontal, .. } => frontal.shape()[0],
        }
    }
}

pub trait Classifier<T: Scalar> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;

    /// Records the forward pass on `tape` and returns `[b,14]` logits.
    fn logits(
        &mut self,
        tape: &mut Tape<T>,
        bound: &Bound,
        input: &ModelInput<T>,
        mode: Mode,
    ) -> Result<Var>;

    /// Eval-mode sigmoid probabilities `[b,14]`.
    fn predict_proba(&mut self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.store().bind(&mut tape);
        let z = self.logits(&mut tape, &bound, input, Mode::Eval)?;
        let p = tape.sigmoid(z);
        Ok(tape.value(p).clone())
    }
}

/// One study's preprocessed image(s): one view, or frontal then lateral.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub study_id: String,
    pub subject_id: String,
    /// Each `[1,side,side]`.
    pub views: Vec<Tensor<T>>,
    pub labels: LabelVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
    pub paired: bool,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>, paired: bool) -> Result<Self> {
        let want = if paired { 2 } else { 1 };
        for s in &samples {
            if s.views.len() != want {
                return Err(Error::Pairing(format!(
                    "study {} has {} view(s), dataset expects {want}",
                    s.study_id,
                    s.views.len()
                )));
            }
        }
        Ok(Dataset { samples, paired })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<LabelVector> {
        self.samples.iter().map(|s| s.labels).collect()
    }

    /// Model input and `[b,14]` targets for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(ModelInput<T>, Tensor<T>)> {
        let pick = |v: usize| -> Result<Tensor<T>> {
            let views: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.samples[i].views[v]).collect();
            Tensor::stack(&views)
        };
        let input = if self.paired {
            ModelInput::Pair {
                frontal: pick(0)?,
                lateral: pick(1)?,
            }
        } else {
            ModelInput::Single(pick(0)?)
        };
        let mut t = Vec::with_capacity(idx.len() * NUM_CLASSES);
        for &i in idx {
            t.extend(self.samples[i].labels.as_f64().iter().map(|&v| T::of(v)));
        }
        Ok((input, Tensor::new(vec![idx.len(), NUM_CLASSES], t)?))
    }

    /// One sample per row whose view is in `views`.
    pub fn single_view(manifest: &Manifest, views: &[View], side: usize) -> Result<Self> {
        let rows: Vec<&ManifestRow> = manifest
            .rows
            .iter()
            .filter(|r| views.contains(&r.view))
            .collect();
        let samples = rows
            .par_iter()
            .map(|r| {
                Ok(Sample {
                    study_id: r.study_id.clone(),
                    subject_id: r.subject_id.clone(),
                    views: vec![load_view(manifest, r, side)?],
                    labels: r.labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, false)
    }

    /// One sample per study of the given pair kind. Studies whose frontal view
    /// is of the other projection are skipped; a study missing either half of
    /// its pair is an error.
    pub fn paired(manifest: &Manifest, pair: PairKind, side: usize) -> Result<Self> {
        let pairs = pair_rows(manifest, pair)?;
        let samples = pairs
            .par_iter()
            .map(|(f, l)| {
                Ok(Sample {
                    study_id: f.study_id.clone(),
                    subject_id: f.subject_id.clone(),
                    views: vec![load_view(manifest, f, side)?, load_view(manifest, l, side)?],
                    labels: f.labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, true)
    }
}

fn load_view<T: Scalar>(manifest: &Manifest, row: &ManifestRow, side: usize) -> Result<Tensor<T>> {
    let path = manifest.resolve(&row.image_path);
    let img = load_image(&path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })?;
    transform_chain(&img, side)
}

/// `(frontal, lateral)` rows per study for `pair`, in study order.
pub fn pair_rows(manifest: &Manifest, pair: PairKind) -> Result<Vec<(&ManifestRow, &ManifestRow)>> {
    let want = pair.frontal_view();
    let mut out = Vec::new();
    for (study, rows) in manifest.studies() {
        let mut by_view: BTreeMap<View, &ManifestRow> = BTreeMap::new();
        for r in &rows {
            if by_view.insert(r.view, r).is_some() {
                return Err(Error::Pairing(format!(
                    "study {study} has more than one {} image",
                    r.view
                )));
            }
        }
        let frontal = by_view.get(&want).copied();
        let other_frontal = by_view.keys().any(|v| v.is_frontal() && *v != want);
        let lateral = by_view.get(&View::Lateral).copied();
        match (frontal, lateral) {
            (Some(f), Some(l)) => {
                if f.labels != l.labels {
                    return Err(Error::Pairing(format!(
                        "study {study}: frontal and lateral labels differ"
                    )));
                }
                out.push((f, l));
            }
            (None, _) if other_frontal => {}
            (Some(_), None) => {
                return Err(Error::Pairing(format!(
                    "study {study} has no lateral image"
                )))
            }
            (None, _) => {
                return Err(Error::Pairing(format!(
                    "study {study} has no {want} image to pair"
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_iterations: Option<u64>,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-cycle length in iterations; two epochs when unset.
    pub step_size: Option<usize>,
    pub seed: u64,
    pub image_side: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 8,
            max_iterations: None,
            base_lr: 0.001,
            max_lr: 0.02,
            step_size: None,
            seed: 0,
            image_side: 64,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, dataset_len: usize) -> Result<CyclicLrConfig> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        let per_epoch = dataset_len.div_ceil(self.batch_size);
        let cfg = CyclicLrConfig {
            base_lr: self.base_lr,
            max_lr: self.max_lr,
            step_size: self.step_size.unwrap_or(2 * per_epoch).max(1),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub iter: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub iterations: u64,
    pub schedule: CyclicLrConfig,
    pub losses: Vec<LossPoint>,
    pub seconds: f64,
}

impl TrainReport {
    /// Mean loss over the first and last `n` iterations.
    pub fn head_tail_means(&self, n: usize) -> (f64, f64) {
        let n = n.clamp(1, self.losses.len().max(1));
        let mean = |s: &[LossPoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.losses[..n.min(self.losses.len())]),
            mean(&self.losses[self.losses.len().saturating_sub(n)..]),
        )
    }
}

/// One forward/backward pass; returns the loss and store-aligned gradients.
pub fn loss_and_grads<T: Scalar, M: Classifier<T>>(
    model: &mut M,
    input: &ModelInput<T>,
    targets: &Tensor<T>,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let z = model.logits(&mut tape, &bound, input, Mode::Train)?;
    let loss = tape.sigmoid_bce(z, targets)?;
    let value = tape.value(loss).item()?.as_f64();
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.collect(&mut grads)))
}

/// One optimizer step on one batch; returns the pre-step loss.
pub fn train_step<T: Scalar, M: Classifier<T>, O: Optimizer<T>>(
    model: &mut M,
    optimizer: &mut O,
    input: &ModelInput<T>,
    targets: &Tensor<T>,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, input, targets)?;
    optimizer.step(model.store_mut(), &grads, lr)?;
    Ok(loss)
}

/// Adam with a Triangular2 schedule over stratified mini-batches.
pub fn train<T: Scalar, M: Classifier<T>>(
    model: &mut M,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let schedule = schedule_checked(cfg, data)?;
    let start = Instant::now();
    let labels = data.labels();
    let mut adam = AdamState::new(model.store());
    let mut iter = 0u64;
    let mut losses = Vec::new();
    'epochs: for epoch in 0..cfg.epochs {
        let batches = stratified_batches(
            &labels_as_arrays(&labels),
            cfg.batch_size,
            epoch_seed(cfg.seed, epoch),
        );
        for idx in batches {
            if cfg.max_iterations.is_some_and(|m| iter >= m) {
                break 'epochs;
            }
            let (input, targets) = data.batch(&idx)?;
            let lr = schedule.lr_at(iter);
            let loss = train_step(model, &mut adam, &input, &targets, lr)?;
            if !loss.is_finite() {
                return Err(Error::Optimizer(format!(
                    "loss became {loss} at iteration {iter}"
                )));
            }
            losses.push(LossPoint {
                iter,
                epoch,
                lr,
                loss,
            });
            iter += 1;
        }
        if let Some(last) = losses.last() {
            log::info!("epoch {epoch}: iteration {iter}, loss {:.4}", last.loss);
        }
    }
    Ok(TrainReport {
        iterations: iter,
        schedule,
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn schedule_checked<T: Scalar>(cfg: &TrainConfig, data: &Dataset<T>) -> Result<CyclicLrConfig> {
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be ≥ 1".into()));
    }
    cfg.schedule(data.len())
}

fn labels_as_arrays(labels: &[LabelVector]) -> Vec<[bool; NUM_CLASSES]> {
    labels.iter().map(|l| l.0).collect()
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Sigmoid probabilities for every sample, in dataset order.
pub fn predict_dataset<T: Scalar, M: Classifier<T>>(
    model: &mut M,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (input, _) = data.batch(chunk)?;
        let p = model.predict_proba(&input)?;
        for r in 0..chunk.len() {
            let row = p.row(r)?;
            let mut a = [0.0; NUM_CLASSES];
            for (d, s) in a.iter_mut().zip(row) {
                *d = s.as_f64();
            }
            out.push(a);
        }
    }
    Ok(out)
}

/// Writes `iter,epoch,lr,loss` rows.
pub fn write_loss_csv<W: Write>(losses: &[LossPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "epoch", "lr", "loss"])?;
    for p in losses {
        w.write_record([
            p.iter.to_string(),
            p.epoch.to_string(),
            format!("{:e}", p.lr),
            format!("{:.6}", p.loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A model plus its data, cycling through fixed stratified batches; lets the
/// learning-rate range test drive any classifier.
#[derive(Clone)]
pub struct RangeProbe<'a, T, M> {
    pub model: M,
    data: &'a Dataset<T>,
    batches: Vec<Vec<usize>>,
}

impl<'a, T: Scalar, M: Classifier<T> + Clone> RangeProbe<'a, T, M> {
    pub fn new(model: M, data: &'a Dataset<T>, batch_size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("range test dataset is empty".into()));
        }
        let batches =
            stratified_batches(&labels_as_arrays(&data.labels()), batch_size.max(1), seed);
        Ok(RangeProbe {
            model,
            data,
            batches,
        })
    }
}

impl<T: Scalar, M: Classifier<T> + Clone> Objective<T> for RangeProbe<'_, T, M> {
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.model.store_mut()
    }

    fn loss_and_grads(&mut self, iter: usize) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let idx = &self.batches[iter % self.batches.len()];
        let (input, targets) = self.data.batch(idx)?;
        loss_and_grads(&mut self.model, &input, &targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densenet::{DenseNetConfig, SingleViewModel};
    use crate::dualnet::DualNetModel;
    use crate::optim::Sgd;

    fn toy_dataset(n: usize, paired: bool) -> Dataset<f32> {
        let samples = (0..n)
            .map(|i| {
                let v = (i % 5) as f32 / 5.0;
                let views = (0..if paired { 2 } else { 1 })
                    .map(|j| Tensor::full(vec![1, 40, 40], v + 0.1 * j as f32))
                    .collect();
                Sample {
                    study_id: format!("st{i}"),
                    subject_id: format!("s{i}"),
                    views,
                    labels: LabelVector::from_findings(if i % 2 == 0 { vec![1] } else { vec![] }),
                }
            })
            .collect();
        Dataset::new(samples, paired).unwrap()
    }

    #[test]
    fn batch_shapes() {
        let d = toy_dataset(5, true);
        let (input, t) = d.batch(&[0, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 14]);
        match input {
            ModelInput::Pair { frontal, lateral } => {
                assert_eq!(frontal.shape(), &[2, 1, 40, 40]);
                assert_eq!(lateral.shape(), &[2, 1, 40, 40]);
            }
            _ => panic!("expected pair"),
        }
    }

    #[test]
    fn empty_dataset_is_input_error() {
        let mut m = SingleViewModel::<f32>::build(&DenseNetConfig::desk(), View::Pa, 0).unwrap();
        let d = Dataset::<f32>::new(vec![], false).unwrap();
        assert!(matches!(
            train(&mut m, &d, &TrainConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn single_small_step_decreases_loss() {
        let cfg = DenseNetConfig::desk();
        let mut m = DualNetModel::<f32>::build(&cfg, &cfg, PairKind::PaLat, 4).unwrap();
        let d = toy_dataset(1, true);
        let (input, targets) = d.batch(&[0]).unwrap();
        let before = loss_and_grads(&mut m, &input, &targets).unwrap().0;
        train_step(&mut m, &mut Sgd, &input, &targets, 1e-2).unwrap();
        let after = loss_and_grads(&mut m, &input, &targets).unwrap().0;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn train_records_one_point_per_step() {
        let mut m = SingleViewModel::<f32>::build(&DenseNetConfig::desk(), View::Pa, 1).unwrap();
        let d = toy_dataset(10, false);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &d, &cfg).unwrap();
        assert_eq!(r.iterations, 6);
        assert_eq!(r.losses.len(), 6);
        assert_eq!(r.schedule.step_size, 6);
        assert_eq!(r.losses[0].lr, 0.001);
    }
}
