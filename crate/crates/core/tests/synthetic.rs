mod common;

use common::cell_score;
use dualnet_core::classes::{finding_indices, LabelVector, View, CLASS_NAMES};
use dualnet_core::metrics::auc;
use dualnet_core::synth::{
    generate_synthetic, plan_studies, render_view, synthetic_manifest, SyntheticSpec, Visibility,
};

fn spec(studies: usize) -> SyntheticSpec {
    SyntheticSpec {
        studies,
        subjects: studies,
        ..SyntheticSpec::default()
    }
}

/// `labels` with finding `class` forced on or off.
fn with_finding(labels: LabelVector, class: usize, on: bool) -> LabelVector {
    LabelVector::from_findings(finding_indices().filter(|&i| {
        if i == class {
            on
        } else {
            labels.get(i)
        }
    }))
}

#[test]
fn positive_counts_within_three_sigma_of_binomial_mean() {
    for seed in 0..5 {
        let plan = plan_studies(&spec(1000), seed).unwrap();
        for c in &spec(1000).classes {
            let k = plan.iter().filter(|s| s.labels.get(c.class)).count() as f64;
            let mean = 1000.0 * c.prevalence;
            let sigma = (1000.0 * c.prevalence * (1.0 - c.prevalence)).sqrt();
            assert!(
                (k - mean).abs() <= 3.0 * sigma,
                "{} seed {seed}: {k} positives, expected {mean} ± {:.1}",
                CLASS_NAMES[c.class],
                3.0 * sigma
            );
        }
    }
}

#[test]
fn frontal_only_class_leaves_lateral_image_untouched() {
    let s = spec(200);
    let plan = plan_studies(&s, 3).unwrap();
    for c in s
        .classes
        .iter()
        .filter(|c| c.visibility == Visibility::FrontalOnly)
    {
        for study in plan.iter().take(60) {
            let mut with = study.clone();
            with.labels = with_finding(study.labels, c.class, true);
            let mut without = study.clone();
            without.labels = with_finding(study.labels, c.class, false);
            assert_eq!(
                render_view(&s, 3, &with, View::Lateral),
                render_view(&s, 3, &without, View::Lateral)
            );
            assert_ne!(
                render_view(&s, 3, &with, View::Pa),
                render_view(&s, 3, &without, View::Pa)
            );
        }
    }
}

#[test]
fn lateral_only_class_leaves_frontal_image_untouched() {
    let s = spec(100);
    let plan = plan_studies(&s, 4).unwrap();
    let lateral_only: Vec<usize> = s
        .classes
        .iter()
        .filter(|c| c.visibility == Visibility::LateralOnly)
        .map(|c| c.class)
        .collect();
    for study in &plan {
        let mut stripped = study.clone();
        for &c in &lateral_only {
            stripped.labels = with_finding(stripped.labels, c, false);
        }
        assert_eq!(
            render_view(&s, 4, study, View::Pa),
            render_view(&s, 4, &stripped, View::Pa)
        );
    }
}

#[test]
fn cell_detector_sees_only_visible_classes() {
    let s = spec(600);
    let plan = plan_studies(&s, 11).unwrap();
    for view in [View::Pa, View::Lateral] {
        let images: Vec<_> = plan
            .iter()
            .map(|st| render_view(&s, 11, st, view))
            .collect();
        for (slot, c) in s.classes.iter().enumerate() {
            let scores: Vec<f64> = images
                .iter()
                .map(|im| cell_score(im, slot, s.classes.len()))
                .collect();
            let labels: Vec<bool> = plan.iter().map(|st| st.labels.get(c.class)).collect();
            let a = auc(&scores, &labels).unwrap();
            let name = CLASS_NAMES[c.class];
            if c.visibility.visible_in(view) {
                assert!(a >= 0.9, "{name} in {view}: AUC {a}");
            } else {
                assert!((0.4..=0.6).contains(&a), "{name} in {view}: AUC {a}");
            }
        }
    }
}

#[test]
fn manifest_has_one_frontal_and_one_lateral_per_study() {
    let s = SyntheticSpec {
        studies: 300,
        subjects: 120,
        ..SyntheticSpec::default()
    };
    let m = synthetic_manifest(&s, 9).unwrap();
    assert_eq!(m.rows.len(), 600);
    for (_, rows) in m.studies() {
        let views: Vec<View> = rows.iter().map(|r| r.view).collect();
        assert_eq!(views, vec![View::Pa, View::Lateral]);
        assert_eq!(rows[0].labels, rows[1].labels);
    }
    let subjects: std::collections::BTreeSet<_> = m.rows.iter().map(|r| &r.subject_id).collect();
    assert_eq!(subjects.len(), 120);
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let s = SyntheticSpec {
        studies: 12,
        subjects: 6,
        image_size: 40,
        ..SyntheticSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(&s, 21, a.path()).unwrap();
    generate_synthetic(&s, 21, b.path()).unwrap();
    let mut n = 0;
    for sub in ["images", "reports"] {
        for e in std::fs::read_dir(a.path().join(sub)).unwrap() {
            let p = e.unwrap().path();
            let q = b.path().join(sub).join(p.file_name().unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
            n += 1;
        }
    }
    assert_eq!(n, 36);
    assert_eq!(
        std::fs::read(a.path().join("manifest.csv")).unwrap(),
        std::fs::read(b.path().join("manifest.csv")).unwrap()
    );
}
