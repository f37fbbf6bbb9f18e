//! Synthetic paired studies with view-dependent class signatures.
//!
//! Each configured class owns one cell of a square grid laid over the image
//! and draws its own primitive there when positive, but only in the views its
//! [`Visibility`] allows. Everything else is smooth noise around a constant
//! background, so a class hidden from a view leaves that view's pixel
//! distribution untouched.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::{LabelVector, View, CLASS_NAMES, NO_FINDING, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::image::{save_image, ImageGray12, MAX_VALUE};
use crate::manifest::{Manifest, ManifestRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Visibility {
    FrontalOnly,
    LateralOnly,
    Both,
}

impl Visibility {
    pub fn visible_in(self, view: View) -> bool {
        match self {
            Visibility::FrontalOnly => view.is_frontal(),
            Visibility::LateralOnly => !view.is_frontal(),
            Visibility::Both => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    /// Canonical class index; No Finding is not allowed.
    pub class: usize,
    pub visibility: Visibility,
    pub prevalence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<SyntheticClass>,
    pub image_size: usize,
    /// Standard deviation of the white noise before smoothing, in gray levels.
    pub noise_level: f64,
    pub subjects: usize,
    /// Total studies; every subject gets at least one.
    pub studies: usize,
    pub frontal_view: View,
    /// Peak pattern intensity above background, in gray levels.
    pub signal: f64,
    pub background: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        use Visibility::*;
        let classes = [
            (1, FrontalOnly, 0.3),
            (10, FrontalOnly, 0.2),
            (4, LateralOnly, 0.3),
            (6, LateralOnly, 0.2),
            (8, Both, 0.25),
            (13, Both, 0.15),
        ]
        .into_iter()
        .map(|(class, visibility, prevalence)| SyntheticClass {
            class,
            visibility,
            prevalence,
        })
        .collect();
        SyntheticSpec {
            classes,
            image_size: 64,
            noise_level: 240.0,
            subjects: 2000,
            studies: 2000,
            frontal_view: View::Pa,
            signal: 500.0,
            background: 1000.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config(
                "synthetic spec needs at least one class".into(),
            ));
        }
        let mut seen = [false; NUM_CLASSES];
        for c in &self.classes {
            if c.class >= NUM_CLASSES || c.class == NO_FINDING {
                return Err(Error::Config(format!("class {} is not a finding", c.class)));
            }
            if std::mem::replace(&mut seen[c.class], true) {
                return Err(Error::Config(format!(
                    "class {} listed twice",
                    CLASS_NAMES[c.class]
                )));
            }
            if !(c.prevalence > 0.0 && c.prevalence < 1.0) {
                return Err(Error::Config(format!(
                    "prevalence of {} must lie in (0,1), got {}",
                    CLASS_NAMES[c.class], c.prevalence
                )));
            }
        }
        for v in [
            Visibility::FrontalOnly,
            Visibility::LateralOnly,
            Visibility::Both,
        ] {
            if !self.classes.iter().any(|c| c.visibility == v) {
                return Err(Error::Config(format!("no class with visibility {v:?}")));
            }
        }
        if !self.frontal_view.is_frontal() {
            return Err(Error::Config("frontal_view must be PA or AP".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if self.subjects == 0 || self.studies < self.subjects {
            return Err(Error::Config(format!(
                "need 1 ≤ subjects ≤ studies, got {} subjects and {} studies",
                self.subjects, self.studies
            )));
        }
        if !(self.noise_level >= 0.0 && self.signal > 0.0) {
            return Err(Error::Config(
                "noise_level must be ≥ 0 and signal > 0".into(),
            ));
        }
        Ok(())
    }

    /// Side of the square grid of pattern cells.
    pub fn grid(&self) -> usize {
        grid_side(self.classes.len())
    }
}

pub fn grid_side(k: usize) -> usize {
    (1..).find(|g| g * g >= k).expect("finite")
}

/// Pixel jitter applied independently to x and y, in `[-MAX_JITTER, MAX_JITTER]`.
pub const MAX_JITTER: i64 = 2;

/// Geometry of the pattern drawn for the class at position `slot` of the spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotGeometry {
    pub center_x: i64,
    pub center_y: i64,
    pub radius: i64,
    pub shape: Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Bar,
    Ring,
    Cross,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Disk,
    Shape::Square,
    Shape::Bar,
    Shape::Ring,
    Shape::Cross,
    Shape::Diamond,
];

impl Shape {
    /// Whether offset `(dx, dy)` from the center lies on the shape.
    pub fn contains(self, dx: i64, dy: i64, r: i64) -> bool {
        let d2 = dx * dx + dy * dy;
        match self {
            Shape::Disk => d2 <= r * r,
            Shape::Square => dx.abs() <= r * 3 / 4 && dy.abs() <= r * 3 / 4,
            Shape::Bar => dx.abs() <= r && dy.abs() <= (r / 3).max(1),
            Shape::Ring => d2 <= r * r && d2 >= (r / 2) * (r / 2),
            Shape::Cross => {
                (dx.abs() <= (r / 4).max(1) && dy.abs() <= r)
                    || (dy.abs() <= (r / 4).max(1) && dx.abs() <= r)
            }
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

pub fn slot_geometry(slot: usize, num_classes: usize, side: usize) -> SlotGeometry {
    let g = grid_side(num_classes);
    let cell = side as f64 / g as f64;
    let (row, col) = (slot / g, slot % g);
    SlotGeometry {
        center_x: ((col as f64 + 0.5) * cell) as i64,
        center_y: ((row as f64 + 0.5) * cell) as i64,
        radius: ((cell * 0.5) as i64 - MAX_JITTER - 1).max(1),
        shape: SHAPES[slot % SHAPES.len()],
    }
}

/// One study in the plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedStudy {
    pub subject: usize,
    pub study: usize,
    pub labels: LabelVector,
}

pub fn subject_id(i: usize) -> String {
    format!("p{i:05}")
}

pub fn study_id(i: usize) -> String {
    format!("s{i:06}")
}

/// Assigns studies to subjects (each at least one, the rest at random) and
/// draws labels independently per class.
pub fn plan_studies(spec: &SyntheticSpec, seed: u64) -> Result<Vec<PlannedStudy>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x5EED]));
    let mut owners: Vec<usize> = (0..spec.subjects).collect();
    owners.extend((spec.subjects..spec.studies).map(|_| rng.random_range(0..spec.subjects)));
    owners.sort_unstable();
    let studies = owners
        .into_iter()
        .enumerate()
        .map(|(study, subject)| {
            let findings: Vec<usize> = spec
                .classes
                .iter()
                .filter(|c| rng.random_bool(c.prevalence))
                .map(|c| c.class)
                .collect();
            PlannedStudy {
                subject,
                study,
                labels: LabelVector::from_findings(findings),
            }
        })
        .collect();
    Ok(studies)
}

fn view_code(v: View) -> u64 {
    match v {
        View::Pa => 1,
        View::Ap => 2,
        View::Lateral => 3,
    }
}

/// SplitMix64-style combination of several words.
fn mix(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        h ^= w
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Renders one view of one study. Deterministic in `(seed, subject, study, view)`.
pub fn render_view(
    spec: &SyntheticSpec,
    seed: u64,
    study: &PlannedStudy,
    view: View,
) -> ImageGray12 {
    let side = spec.image_size;
    let img_seed = mix(&[
        seed,
        study.subject as u64,
        study.study as u64,
        view_code(view),
    ]);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(img_seed);
    let normal = Normal::new(0.0, spec.noise_level.max(0.0)).expect("finite noise");
    let white: Vec<f64> = (0..side * side)
        .map(|_| normal.sample(&mut noise_rng))
        .collect();
    // 3x3 box blur with clamped borders: correlated background texture.
    let mut field = vec![spec.background; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sx = (x as i64 + dx).clamp(0, side as i64 - 1) as usize;
                    let sy = (y as i64 + dy).clamp(0, side as i64 - 1) as usize;
                    acc += white[sy * side + sx];
                }
            }
            field[y * side + x] += acc / 3.0;
        }
    }
    for (slot, c) in spec.classes.iter().enumerate() {
        if !study.labels.get(c.class) || !c.visibility.visible_in(view) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[img_seed, 0xC1A55, slot as u64]));
        let jx = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        let jy = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        let amp = spec.signal * rng.random_range(0.7..=1.0);
        let g = slot_geometry(slot, spec.classes.len(), side);
        let (cx, cy) = (g.center_x + jx, g.center_y + jy);
        for y in (cy - g.radius).max(0)..=(cy + g.radius).min(side as i64 - 1) {
            for x in (cx - g.radius).max(0)..=(cx + g.radius).min(side as i64 - 1) {
                if g.shape.contains(x - cx, y - cy, g.radius) {
                    field[y as usize * side + x as usize] += amp;
                }
            }
        }
    }
    let pixels = field
        .into_iter()
        .map(|v| v.round().clamp(0.0, MAX_VALUE as f64) as u16)
        .collect();
    ImageGray12::new(side, side, pixels).expect("valid synthetic image")
}

fn image_name(study: &PlannedStudy, view: View) -> String {
    format!(
        "images/{}_{}.pgm",
        study_id(study.study),
        view.as_str().to_ascii_lowercase()
    )
}

/// The manifest `generate_synthetic` would write, without touching the disk.
pub fn synthetic_manifest(spec: &SyntheticSpec, seed: u64) -> Result<Manifest> {
    let plan = plan_studies(spec, seed)?;
    Ok(manifest_for(spec, &plan))
}

fn manifest_for(spec: &SyntheticSpec, plan: &[PlannedStudy]) -> Manifest {
    let mut rows = Vec::with_capacity(2 * plan.len());
    for s in plan {
        for view in [spec.frontal_view, View::Lateral] {
            rows.push(ManifestRow {
                subject_id: subject_id(s.subject),
                study_id: study_id(s.study),
                view,
                image_path: image_name(s, view),
                labels: s.labels,
                split: None,
            });
        }
    }
    Manifest::new(rows)
}

/// Phrase used for a positive finding in generated reports.
pub const REPORT_PHRASES: [&str; NUM_CLASSES] = [
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "pulmonary edema",
    "pleural effusion",
    "fibrosis",
    "hiatal hernia",
    "infiltrate",
    "mass",
    "",
    "nodule",
    "pleural thickening",
    "pneumonia",
    "pneumothorax",
];

/// A short free-text report whose labeled findings equal `labels`.
pub fn render_report(spec: &SyntheticSpec, study: &PlannedStudy) -> String {
    let mut findings = Vec::new();
    let mut negated = Vec::new();
    for c in &spec.classes {
        if study.labels.get(c.class) {
            findings.push(format!("There is {}.", REPORT_PHRASES[c.class]));
        } else {
            negated.push(REPORT_PHRASES[c.class]);
        }
    }
    let mut text = String::from("INDICATION: Synthetic study.\n\nFINDINGS: ");
    if findings.is_empty() {
        text.push_str("The lungs are clear.");
    } else {
        text.push_str(&findings.join(" "));
    }
    for phrase in negated {
        text.push_str(&format!(" No {phrase}."));
    }
    text.push_str("\n\nIMPRESSION: ");
    text.push_str(if findings.is_empty() {
        "No acute cardiopulmonary process."
    } else {
        "As above."
    });
    text.push('\n');
    text
}

/// Writes `images/*.pgm`, `reports/<study>.txt` and `manifest.csv` under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let plan = plan_studies(spec, seed)?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("reports"))?;
    plan.par_iter().try_for_each(|s| -> Result<()> {
        for view in [spec.frontal_view, View::Lateral] {
            let img = render_view(spec, seed, s, view);
            save_image(&img, out_dir.join(image_name(s, view)))?;
        }
        fs::write(
            out_dir
                .join("reports")
                .join(format!("{}.txt", study_id(s.study))),
            render_report(spec, s),
        )?;
        Ok(())
    })?;
    let mut manifest = manifest_for(spec, &plan);
    manifest.write(out_dir.join("manifest.csv"))?;
    manifest.base_dir = out_dir.to_path_buf();
    Ok(manifest)
}
