//! Binary checkpoint container.
//!
//! ```text
//! "DNV1" | version: u32 LE | header_len: u64 LE | header JSON
//! tensor_count: u32 LE
//! per tensor: name_len: u32 LE | name (UTF-8) | rank: u32 LE | dims: u64 LE × rank | f32 LE × numel
//! ```
//!
//! The header records the model kind and configuration, training metadata and
//! a SHA-256 over the tensor names and shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classes::View;
use crate::densenet::{DenseNetConfig, SingleViewModel};
use crate::dualnet::{DualNetModel, PairKind};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::optim::CyclicLrConfig;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Classifier, ModelInput};

pub const MAGIC: &[u8; 4] = b"DNV1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Single {
        view: View,
        config: DenseNetConfig,
    },
    Dual {
        pair: PairKind,
        frontal: DenseNetConfig,
        lateral: DenseNetConfig,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub iterations: u64,
    pub scheduler: Option<CyclicLrConfig>,
    /// Square input side the model was trained at.
    #[serde(default)]
    pub image_side: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    meta: TrainingMeta,
    layout_hash: String,
}

/// A model of either kind, as restored from a checkpoint.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum AnyModel {
    Single(SingleViewModel<f32>),
    Dual(DualNetModel<f32>),
}

impl AnyModel {
    pub fn spec(&self) -> ModelSpec {
        match self {
            AnyModel::Single(m) => ModelSpec::Single {
                view: m.view,
                config: m.cfg.clone(),
            },
            AnyModel::Dual(m) => ModelSpec::Dual {
                pair: m.pair,
                frontal: m.cfg_frontal.clone(),
                lateral: m.cfg_lateral.clone(),
            },
        }
    }

    fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Single { view, config } => {
                AnyModel::Single(SingleViewModel::build(config, *view, seed)?)
            }
            ModelSpec::Dual {
                pair,
                frontal,
                lateral,
            } => AnyModel::Dual(DualNetModel::build(frontal, lateral, *pair, seed)?),
        })
    }
}

impl Classifier<f32> for AnyModel {
    fn store(&self) -> &ParamStore<f32> {
        match self {
            AnyModel::Single(m) => &m.store,
            AnyModel::Dual(m) => &m.store,
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            AnyModel::Single(m) => &mut m.store,
            AnyModel::Dual(m) => &mut m.store,
        }
    }

    fn logits(
        &mut self,
        tape: &mut Tape<f32>,
        bound: &Bound,
        input: &ModelInput<f32>,
        mode: Mode,
    ) -> Result<Var> {
        match self {
            AnyModel::Single(m) => m.logits(tape, bound, input, mode),
            AnyModel::Dual(m) => m.logits(tape, bound, input, mode),
        }
    }
}

fn layout_hash(layout: &[(String, Vec<usize>)]) -> String {
    let mut h = Sha256::new();
    for (name, shape) in layout {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((shape.len() as u64).to_le_bytes());
        for &d in shape {
            h.update((d as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(model: &AnyModel, meta: &TrainingMeta) -> Result<Vec<u8>> {
    let store = model.store();
    let header = Header {
        model: model.spec(),
        meta: meta.clone(),
        layout_hash: layout_hash(&store.layout()),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Format("too many tensors for a checkpoint".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.bytes.len() as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}",
                    self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(AnyModel, TrainingMeta)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?} at offset 0, expected \"DNV1\""
        )));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} at offset 4"
        )));
    }
    let header_len = c.u64("header length")?;
    let header_off = c.pos;
    let raw = c.take(usize::try_from(header_len).unwrap_or(usize::MAX), "header")?;
    let header: Header = serde_json::from_slice(raw)
        .map_err(|e| Error::parse(header_off as u64, format!("bad header JSON: {e}")))?;

    let mut model = AnyModel::build(&header.model, header.meta.seed)?;
    let expected = model.store().layout();
    if layout_hash(&expected) != header.layout_hash {
        return Err(Error::Integrity(
            "configuration does not describe the stored weights (layout hash mismatch)".into(),
        ));
    }
    let count_off = c.pos;
    let count = c.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::parse(
            count_off as u64,
            format!(
                "tensor count {count}, configuration needs {}",
                expected.len()
            ),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    let mut seen = Vec::with_capacity(count);
    for _ in 0..count {
        let name_off = c.pos;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::parse(name_off as u64, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::parse(c.pos as u64, "tensor size overflows"))?;
        let payload = c.take(numel.saturating_mul(4), "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        seen.push((name, shape.clone()));
        tensors.push(Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::parse(
            c.pos as u64,
            format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - c.pos
            ),
        ));
    }
    if layout_hash(&seen) != header.layout_hash {
        return Err(Error::Integrity(
            "stored tensors do not match the header's layout hash".into(),
        ));
    }
    for (e, t) in model.store_mut().entries_mut().iter_mut().zip(tensors) {
        e.value = t;
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &AnyModel,
    meta: &TrainingMeta,
) -> Result<()> {
    std::fs::write(path, encode(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(AnyModel, TrainingMeta)> {
    decode(&std::fs::read(path)?)
}
