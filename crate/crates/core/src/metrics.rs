//! ROC AUC, per-class reports and the individual-versus-dual comparison.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::classes::{LabelVector, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::{predict_dataset, Classifier, Dataset};

/// Rank-statistic AUC with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("AUC scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        pos_rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn column(scores: &[[f64; NUM_CLASSES]], c: usize) -> Vec<f64> {
    scores.iter().map(|r| r[c]).collect()
}

fn truth(labels: &[LabelVector], c: usize) -> Vec<bool> {
    labels.iter().map(|l| l.get(c)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerClassReport {
    pub model: String,
    pub kind: String,
    /// `None` where the class is undefined (single-class labels).
    pub auc: [Option<f64>; NUM_CLASSES],
    pub average: Option<f64>,
    pub samples: usize,
    pub positives: [usize; NUM_CLASSES],
}

impl PerClassReport {
    pub fn from_scores(
        model: &str,
        kind: &str,
        scores: &[[f64; NUM_CLASSES]],
        labels: &[LabelVector],
    ) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} score rows for {} label rows",
                scores.len(),
                labels.len()
            )));
        }
        let mut out = [None; NUM_CLASSES];
        let mut positives = [0; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            let y = truth(labels, c);
            positives[c] = y.iter().filter(|&&b| b).count();
            out[c] = match auc(&column(scores, c), &y) {
                Ok(a) => Some(a),
                Err(Error::UndefinedAuc(why)) => {
                    log::warn!(
                        "{}: AUC is N/A ({why}); excluded from average",
                        CLASS_NAMES[c]
                    );
                    None
                }
                Err(e) => return Err(e),
            };
        }
        Ok(PerClassReport {
            model: model.to_string(),
            kind: kind.to_string(),
            average: mean_defined(out.iter().copied()),
            auc: out,
            samples: labels.len(),
            positives,
        })
    }

    /// Mean AUC over `classes`, skipping undefined ones.
    pub fn macro_over(&self, classes: &[usize]) -> Option<f64> {
        mean_defined(classes.iter().map(|&c| self.auc[c]))
    }

    /// `{class: auc|null, ..., "average": x, "n": {...}}`
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (c, name) in CLASS_NAMES.iter().enumerate() {
            m.insert(name.to_string(), json!(self.auc[c]));
        }
        m.insert("average".into(), json!(self.average));
        let mut n = Map::new();
        n.insert("samples".into(), json!(self.samples));
        for (c, name) in CLASS_NAMES.iter().enumerate() {
            n.insert(name.to_string(), json!(self.positives[c]));
        }
        m.insert("n".into(), Value::Object(n));
        m.insert("model".into(), json!(self.model));
        m.insert("kind".into(), json!(self.kind));
        Value::Object(m)
    }
}

/// Scores `model` on every sample of `data`.
pub fn evaluate<T: Scalar, M: Classifier<T>>(
    model: &mut M,
    data: &Dataset<T>,
    name: &str,
    kind: &str,
) -> Result<PerClassReport> {
    let scores = predict_dataset(model, data, 64)?;
    PerClassReport::from_scores(name, kind, &scores, &data.labels())
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// How two single-view probabilities are combined into one per study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fuse {
    #[default]
    Mean,
    Max,
}

impl Fuse {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Fuse::Mean => 0.5 * (a + b),
            Fuse::Max => a.max(b),
        }
    }
}

impl fmt::Display for Fuse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fuse::Mean => "mean",
            Fuse::Max => "max",
        })
    }
}

impl FromStr for Fuse {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Fuse::Mean),
            "max" => Ok(Fuse::Max),
            other => Err(Error::Config(format!(
                "fuse must be mean or max, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub class: String,
    pub individual: Option<f64>,
    pub dual: Option<f64>,
    /// DualNet at least as good as the fused single-view models.
    pub dual_ge: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub fuse: Fuse,
    pub rows: Vec<ComparisonRow>,
    pub individual_average: Option<f64>,
    pub dual_average: Option<f64>,
}

/// Scores the fused single-view probabilities and the dual model's on the same studies.
pub fn compare_dual(
    frontal: &[[f64; NUM_CLASSES]],
    lateral: &[[f64; NUM_CLASSES]],
    dual: &[[f64; NUM_CLASSES]],
    labels: &[LabelVector],
    fuse: Fuse,
) -> Result<ComparisonReport> {
    if frontal.len() != lateral.len() || frontal.len() != dual.len() {
        return Err(Error::Pairing(format!(
            "prediction counts differ: frontal {}, lateral {}, dual {}",
            frontal.len(),
            lateral.len(),
            dual.len()
        )));
    }
    let fused: Vec<[f64; NUM_CLASSES]> = frontal
        .iter()
        .zip(lateral)
        .map(|(f, l)| std::array::from_fn(|c| fuse.apply(f[c], l[c])))
        .collect();
    let ind = PerClassReport::from_scores("individual", "pair", &fused, labels)?;
    let du = PerClassReport::from_scores("dualnet", "pair", dual, labels)?;
    let rows = (0..NUM_CLASSES)
        .map(|c| ComparisonRow {
            class: CLASS_NAMES[c].to_string(),
            individual: ind.auc[c],
            dual: du.auc[c],
            dual_ge: matches!((du.auc[c], ind.auc[c]), (Some(d), Some(i)) if d >= i),
        })
        .collect();
    Ok(ComparisonReport {
        fuse,
        rows,
        individual_average: ind.average,
        dual_average: du.average,
    })
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |a| format!("{a:.4}"))
}

impl ComparisonReport {
    /// `class,individual,dualnet,dualnet_ge_individual`, 14 classes plus `Average`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "individual", "dualnet", "dualnet_ge_individual"])?;
        for r in &self.rows {
            w.write_record([
                r.class.clone(),
                fmt_auc(r.individual),
                fmt_auc(r.dual),
                r.dual_ge.to_string(),
            ])?;
        }
        let avg_ge =
            matches!((self.dual_average, self.individual_average), (Some(d), Some(i)) if d >= i);
        w.write_record([
            "Average".to_string(),
            fmt_auc(self.individual_average),
            fmt_auc(self.dual_average),
            avg_ge.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}
