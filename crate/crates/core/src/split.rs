//! Subject-disjoint train/valid/test assignment and the prevalence audit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{View, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            valid: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.valid, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::Config(format!(
                "split fractions must lie in (0,1), got {a:?}"
            )));
        }
        if (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {a:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub subjects: BTreeMap<String, Split>,
    pub fractions: SplitFractions,
    pub seed: u64,
}

impl SplitAssignment {
    /// Writes each row's split from its subject.
    pub fn apply(&self, manifest: &mut Manifest) -> Result<()> {
        for r in &mut manifest.rows {
            let s = self.subjects.get(&r.subject_id).ok_or_else(|| {
                Error::Validation(format!("subject {} has no split", r.subject_id))
            })?;
            r.split = Some(*s);
        }
        Ok(())
    }

    pub fn subjects_in(&self, split: Split) -> BTreeSet<&str> {
        self.subjects
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

/// Quantities kept proportional while assigning subjects: image count per
/// view, then positive images per view and class.
fn balance_vector(views: &[View], rows: &[&crate::manifest::ManifestRow]) -> Vec<f64> {
    let mut v = vec![0.0; views.len() * (1 + NUM_CLASSES)];
    for r in rows {
        let vi = views.iter().position(|&x| x == r.view).expect("known view");
        v[vi] += 1.0;
        for c in r.labels.positives() {
            v[views.len() + vi * NUM_CLASSES + c] += 1.0;
        }
    }
    v
}

/// Shuffles subjects by `seed`, orders them largest first, then places each in
/// the split that keeps every split closest to its share of all images and of
/// every (view, class) positive count assigned so far.
pub fn split_by_subject(
    manifest: &Manifest,
    fractions: &SplitFractions,
    seed: u64,
) -> Result<(SplitAssignment, PrevalenceReport)> {
    fractions.validate()?;
    let f = fractions.as_array();
    let mut by_subject: BTreeMap<&str, Vec<&crate::manifest::ManifestRow>> = BTreeMap::new();
    for r in &manifest.rows {
        by_subject.entry(r.subject_id.as_str()).or_default().push(r);
    }
    if by_subject.len() < Split::ALL.len() {
        return Err(Error::Input(format!(
            "need at least {} subjects to split, found {}",
            Split::ALL.len(),
            by_subject.len()
        )));
    }
    let views: Vec<View> = manifest
        .rows
        .iter()
        .map(|r| r.view)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut subjects: Vec<(&str, Vec<f64>, usize)> = by_subject
        .iter()
        .map(|(s, rows)| (*s, balance_vector(&views, rows), rows.len()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    subjects.sort_by_key(|s| std::cmp::Reverse(s.2));

    let dims = views.len() * (1 + NUM_CLASSES);
    let mut totals = vec![0.0; dims];
    let mut per_split = vec![vec![0.0; dims]; 3];
    let mut count = [0usize; 3];
    let mut out = BTreeMap::new();
    for (i, (name, vec, _)) in subjects.iter().enumerate() {
        for k in 0..dims {
            totals[k] += vec[k];
        }
        let remaining = subjects.len() - i;
        // A split still without subjects takes the next one when only enough remain.
        let empty: Vec<usize> = (0..3).filter(|&j| count[j] == 0).collect();
        let candidates: Vec<usize> = if !empty.is_empty() && remaining <= empty.len() {
            empty
        } else {
            (0..3).collect()
        };
        let cost = |j: usize| -> f64 {
            let mut c = 0.0;
            for (s, fs) in f.iter().enumerate() {
                for k in 0..dims {
                    if totals[k] == 0.0 {
                        continue;
                    }
                    let x = per_split[s][k] + if s == j { vec[k] } else { 0.0 };
                    let d = x - fs * totals[k];
                    // Image counts weigh as much as all class counts together.
                    let w = if k < views.len() {
                        NUM_CLASSES as f64
                    } else {
                        1.0
                    };
                    c += w * d * d / (fs * totals[k]);
                }
            }
            c
        };
        let j = candidates
            .iter()
            .copied()
            .min_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b)))
            .expect("non-empty");
        for k in 0..dims {
            per_split[j][k] += vec[k];
        }
        count[j] += 1;
        out.insert(name.to_string(), Split::ALL[j]);
    }
    let assignment = SplitAssignment {
        subjects: out,
        fractions: *fractions,
        seed,
    };
    let mut annotated = manifest.clone();
    assignment.apply(&mut annotated)?;
    let report = prevalence_report(&annotated);
    Ok((assignment, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrevalenceRow {
    pub split: Split,
    pub view: View,
    /// A class name, or `Total` for the view's image count.
    pub class: String,
    pub count: usize,
    /// Percent of the split's images of this view (for `Total`, of all the split's images).
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrevalenceReport {
    pub rows: Vec<PrevalenceRow>,
    /// Largest spread, in percentage points, of any (view, class) prevalence across splits.
    pub max_deviation_pp: f64,
    /// Share of all images in train, valid, test.
    pub image_fractions: [f64; 3],
}

/// Audits a manifest whose rows carry splits; rows without one are ignored.
pub fn prevalence_report(manifest: &Manifest) -> PrevalenceReport {
    let views: BTreeSet<View> = manifest.rows.iter().map(|r| r.view).collect();
    let mut images = BTreeMap::<(Split, View), usize>::new();
    let mut pos = BTreeMap::<(Split, View, usize), usize>::new();
    let mut split_images = [0usize; 3];
    for r in &manifest.rows {
        let Some(s) = r.split else { continue };
        *images.entry((s, r.view)).or_default() += 1;
        split_images[s as usize] += 1;
        for c in r.labels.positives() {
            *pos.entry((s, r.view, c)).or_default() += 1;
        }
    }
    let total_images: usize = split_images.iter().sum();
    let mut rows = Vec::new();
    let mut max_dev: f64 = 0.0;
    for &v in &views {
        for s in Split::ALL {
            let n = images.get(&(s, v)).copied().unwrap_or(0);
            rows.push(PrevalenceRow {
                split: s,
                view: v,
                class: "Total".into(),
                count: n,
                percent: pct(n, split_images[s as usize]),
            });
        }
        for (c, name) in CLASS_NAMES.iter().enumerate() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for s in Split::ALL {
                let n = images.get(&(s, v)).copied().unwrap_or(0);
                let k = pos.get(&(s, v, c)).copied().unwrap_or(0);
                let p = pct(k, n);
                if n > 0 {
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
                rows.push(PrevalenceRow {
                    split: s,
                    view: v,
                    class: name.to_string(),
                    count: k,
                    percent: p,
                });
            }
            if hi >= lo {
                max_dev = max_dev.max(hi - lo);
            }
        }
    }
    let frac = |i: usize| split_images[i] as f64 / total_images.max(1) as f64;
    PrevalenceReport {
        rows,
        max_deviation_pp: max_dev,
        image_fractions: [frac(0), frac(1), frac(2)],
    }
}

fn pct(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

impl PrevalenceReport {
    /// Writes `split,view,class,count,percent` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "view", "class", "count", "percent"])?;
        for r in &self.rows {
            w.write_record([
                r.split.as_str().to_string(),
                r.view.as_str().to_string(),
                r.class.clone(),
                r.count.to_string(),
                format!("{:.2}", r.percent),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
