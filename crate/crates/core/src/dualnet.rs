//! Two-branch classifier: frontal and lateral DenseNet features fused by
//! concatenation ahead of a shared 14-way head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::View;
use crate::densenet::{DenseNetConfig, DenseNetFeatures, SingleViewModel};
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, Linear, Mode};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Classifier, ModelInput};

/// Which frontal projection is paired with the lateral image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    #[serde(rename = "PA_LAT")]
    PaLat,
    #[serde(rename = "AP_LAT")]
    ApLat,
}

impl PairKind {
    pub fn frontal_view(self) -> View {
        match self {
            PairKind::PaLat => View::Pa,
            PairKind::ApLat => View::Ap,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::PaLat => "PA_LAT",
            PairKind::ApLat => "AP_LAT",
        }
    }
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PA_LAT" => Ok(PairKind::PaLat),
            "AP_LAT" => Ok(PairKind::ApLat),
            other => Err(Error::Config(format!(
                "pair kind must be PA_LAT or AP_LAT, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualNetModel<T> {
    pub cfg_frontal: DenseNetConfig,
    pub cfg_lateral: DenseNetConfig,
    pub pair: PairKind,
    pub seed: u64,
    pub store: ParamStore<T>,
    pub frontal: DenseNetFeatures,
    pub lateral: DenseNetFeatures,
    head: Linear,
}

impl<T: Scalar> DualNetModel<T> {
    pub fn build(
        cfg_frontal: &DenseNetConfig,
        cfg_lateral: &DenseNetConfig,
        pair: PairKind,
        seed: u64,
    ) -> Result<Self> {
        if cfg_frontal.num_outputs != cfg_lateral.num_outputs {
            return Err(Error::Config(format!(
                "branch output counts differ: {} vs {}",
                cfg_frontal.num_outputs, cfg_lateral.num_outputs
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let frontal = DenseNetFeatures::build(cfg_frontal, &mut store, "frontal.", &mut rng)?;
        let lateral = DenseNetFeatures::build(cfg_lateral, &mut store, "lateral.", &mut rng)?;
        let head = Linear::new(
            &mut store,
            "head",
            frontal.feature_width + lateral.feature_width,
            cfg_frontal.num_outputs,
            &mut rng,
        );
        Ok(DualNetModel {
            cfg_frontal: cfg_frontal.clone(),
            cfg_lateral: cfg_lateral.clone(),
            pair,
            seed,
            store,
            frontal,
            lateral,
            head,
        })
    }

    /// Width of the concatenated feature vector entering the head.
    pub fn fusion_width(&self) -> usize {
        self.frontal.feature_width + self.lateral.feature_width
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Copies branch weights from trained single-view models. Returns the
    /// number of tensors copied.
    pub fn warm_start(
        &mut self,
        frontal: &SingleViewModel<T>,
        lateral: &SingleViewModel<T>,
    ) -> Result<usize> {
        let a = self.store.load_matching(&frontal.store, "frontal.")?;
        let b = self.store.load_matching(&lateral.store, "lateral.")?;
        Ok(a + b)
    }

    /// Logits `[b,14]` from frontal `[b,1,h,w]` and lateral `[b,1,h',w']` batches.
    pub fn forward_pair(
        &mut self,
        tape: &mut Tape<T>,
        bound: &Bound,
        frontal: Var,
        lateral: Var,
        mode: Mode,
    ) -> Result<Var> {
        let bf = tape.shape(frontal).first().copied();
        let bl = tape.shape(lateral).first().copied();
        if bf != bl {
            return Err(Error::Shape(format!(
                "frontal batch {bf:?} does not match lateral batch {bl:?}"
            )));
        }
        let mut ctx = Ctx {
            tape,
            store: &mut self.store,
            bound,
            mode,
        };
        let ff = self.frontal.forward(&mut ctx, frontal)?;
        let fl = self.lateral.forward(&mut ctx, lateral)?;
        let fused = nn::concat_features(ctx.tape, ff, fl)?;
        self.head.forward(&mut ctx, fused)
    }

    /// Eval-mode logits; both views are required.
    pub fn predict_pair(
        &mut self,
        frontal: Option<&Tensor<T>>,
        lateral: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let (f, l) = match (frontal, lateral) {
            (Some(f), Some(l)) => (f, l),
            (None, _) => return Err(Error::Pairing("frontal view missing".into())),
            (_, None) => return Err(Error::Pairing("lateral view missing".into())),
        };
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let fv = tape.constant(f.clone());
        let lv = tape.constant(l.clone());
        let y = self.forward_pair(&mut tape, &bound, fv, lv, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Classifier<T> for DualNetModel<T> {
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
            ModelInput::Pair { frontal, lateral } => {
                let f = tape.constant(frontal.clone());
                let l = tape.constant(lateral.clone());
                self.forward_pair(tape, bound, f, l, mode)
            }
            ModelInput::Single(_) => Err(Error::Pairing(
                "dual-view model needs a frontal/lateral pair".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, side: usize, v: f32) -> Tensor<f32> {
        Tensor::full(vec![b, 1, side, side], v)
    }

    #[test]
    fn pair_kind_parse() {
        assert_eq!("pa_lat".parse::<PairKind>().unwrap(), PairKind::PaLat);
        assert_eq!(
            "AP_LAT".parse::<PairKind>().unwrap().frontal_view(),
            View::Ap
        );
        assert!(matches!(
            "LAT_PA".parse::<PairKind>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fusion_width_densenet121() {
        let cfg = DenseNetConfig::densenet121();
        let m = DualNetModel::<f32>::build(&cfg, &cfg, PairKind::PaLat, 1).unwrap();
        assert_eq!(m.fusion_width(), 2048);
    }

    #[test]
    fn fusion_width_of_132_wide_branches() {
        // 64 +32 = 96 → 48, +32 = 80 → 40, +32 = 72 → 36, +3·32 = 132.
        let cfg = DenseNetConfig {
            block_layers: vec![1, 1, 1, 3],
            ..DenseNetConfig::densenet121()
        };
        let m = DualNetModel::<f32>::build(&cfg, &cfg, PairKind::ApLat, 1).unwrap();
        assert_eq!(m.frontal.feature_width, 132);
        assert_eq!(m.fusion_width(), 264);
    }

    #[test]
    fn forward_shapes_and_errors() {
        let cfg = DenseNetConfig::desk();
        let mut m = DualNetModel::<f32>::build(&cfg, &cfg, PairKind::PaLat, 3).unwrap();
        assert_eq!(m.fusion_width(), 2 * m.frontal.feature_width);
        let y = m
            .predict_pair(Some(&images(2, 48, 0.3)), Some(&images(2, 48, 0.6)))
            .unwrap();
        assert_eq!(y.shape(), &[2, 14]);
        assert!(y.is_finite());
        assert!(matches!(
            m.predict_pair(Some(&images(2, 48, 0.3)), Some(&images(3, 48, 0.6))),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            m.predict_pair(Some(&images(1, 48, 0.3)), None),
            Err(Error::Pairing(_))
        ));
    }

    #[test]
    fn branches_are_independent() {
        let cfg = DenseNetConfig::desk();
        let m = DualNetModel::<f32>::build(&cfg, &cfg, PairKind::PaLat, 3).unwrap();
        let fw = m.store.find("frontal.stem.conv.weight").unwrap();
        let lw = m.store.find("lateral.stem.conv.weight").unwrap();
        assert_ne!(fw, lw);
        assert_ne!(m.store.get(fw).data(), m.store.get(lw).data());
    }

    #[test]
    fn warm_start_copies_branch_weights() {
        let cfg = DenseNetConfig::desk();
        let f = SingleViewModel::<f32>::build(&cfg, View::Pa, 10).unwrap();
        let l = SingleViewModel::<f32>::build(&cfg, View::Lateral, 11).unwrap();
        let mut m = DualNetModel::<f32>::build(&cfg, &cfg, PairKind::PaLat, 3).unwrap();
        let n = m.warm_start(&f, &l).unwrap();
        assert!(n > 0);
        let src = f.store.get(f.store.find("stem.conv.weight").unwrap());
        let dst = m
            .store
            .get(m.store.find("frontal.stem.conv.weight").unwrap());
        assert_eq!(src.data(), dst.data());
    }
}
