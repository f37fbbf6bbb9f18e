use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualnet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dualnet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_flag_exits_1_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualnet(&["--no-such-flag"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dualnet(&["--help"], dir.path())), 0);
    assert_eq!(code(&dualnet(&["train", "--help"], dir.path())), 0);
}

#[test]
fn eval_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("m.csv"),
        "subject_id,study_id,view,image_path,labels,split\n",
    )
    .unwrap();
    let o = dualnet(
        &[
            "eval",
            "--checkpoint",
            "missing.ckpt",
            "--manifest",
            "m.csv",
            "--out",
            "m.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ckpt"));
}

#[test]
fn corrupt_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("m.csv"),
        "subject_id,study_id,view,image_path,labels,split\n",
    )
    .unwrap();
    fs::write(dir.path().join("bad.ckpt"), b"XXXX0000").unwrap();
    let o = dualnet(
        &[
            "eval",
            "--checkpoint",
            "bad.ckpt",
            "--manifest",
            "m.csv",
            "--out",
            "m.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_fraction_sum_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualnet(
        &[
            "generate-synth",
            "--out",
            "d",
            "--studies",
            "12",
            "--subjects",
            "6",
            "--image-size",
            "40",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = dualnet(
        &[
            "split",
            "--manifest",
            "d/manifest.csv",
            "--train",
            "0.8",
            "--valid",
            "0.1",
            "--test",
            "0.2",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ok = |args: &[&str]| {
        let o = dualnet(args, p);
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    };

    ok(&[
        "--seed",
        "5",
        "generate-synth",
        "--out",
        "data",
        "--studies",
        "40",
        "--subjects",
        "20",
        "--image-size",
        "40",
    ]);
    assert!(p.join("data/manifest.csv").exists());
    assert_eq!(fs::read_dir(p.join("data/reports")).unwrap().count(), 40);
    assert_eq!(fs::read_dir(p.join("data/images")).unwrap().count(), 80);

    // Report labels reproduce the generator's labels.
    ok(&[
        "label",
        "--reports",
        "data/reports",
        "--out",
        "lab",
        "--manifest",
        "data/manifest.csv",
    ]);
    let original = fs::read_to_string(p.join("data/manifest.csv")).unwrap();
    let labels = fs::read_to_string(p.join("lab/labels.csv")).unwrap();
    assert!(labels.starts_with("study_id,labels\n"));
    for line in labels.lines().skip(1) {
        let (study, bits) = line.split_once(',').unwrap();
        let expected = original
            .lines()
            .find(|l| l.contains(&format!(",{study},")))
            .unwrap();
        assert!(expected.contains(&format!(",{bits},")), "{study}");
    }
    assert!(fs::read_to_string(p.join("lab/label_prevalence.csv"))
        .unwrap()
        .starts_with("class,total,percent\n"));
    assert!(json(&p.join("lab/mentions.json")).is_object());

    ok(&[
        "--seed",
        "17",
        "split",
        "--manifest",
        "lab/labeled_manifest.csv",
        "--train",
        "0.7",
        "--valid",
        "0.1",
        "--test",
        "0.2",
    ]);
    let split = fs::read_to_string(p.join("lab/split_manifest.csv")).unwrap();
    assert_eq!(split.lines().count(), 81);
    assert!(split.lines().skip(1).all(|l| {
        let last = l.rsplit(',').next().unwrap();
        ["train", "valid", "test"].contains(&last)
    }));
    assert!(fs::read_to_string(p.join("lab/prevalence.csv"))
        .unwrap()
        .starts_with("split,view,class,count,percent\n"));

    fs::write(
        p.join("cfg.json"),
        r#"{"model":{"stem_channels":4,"growth_rate":2,"block_layers":[1,1,1,1]},
            "train":{"batch_size":4,"epochs":1,"image_side":40}}"#,
    )
    .unwrap();
    let m = "lab/split_manifest.csv";
    ok(&[
        "train",
        "--arch",
        "single",
        "--view",
        "PA",
        "--config",
        "cfg.json",
        "--manifest",
        m,
        "--out",
        "front",
    ]);
    ok(&[
        "train",
        "--arch",
        "single",
        "--view",
        "LATERAL",
        "--config",
        "cfg.json",
        "--manifest",
        m,
        "--out",
        "lat",
    ]);
    ok(&[
        "train",
        "--arch",
        "dual",
        "--config",
        "cfg.json",
        "--manifest",
        m,
        "--out",
        "dual",
        "--max-iterations",
        "2",
        "--warm-start",
        "front/model.ckpt",
        "lat/model.ckpt",
    ]);
    let loss = fs::read_to_string(p.join("dual/loss.csv")).unwrap();
    assert!(loss.starts_with("iter,epoch,lr,loss\n"));
    assert_eq!(loss.lines().count(), 3);
    let run = json(&p.join("dual/run-train.json"));
    assert_eq!(run["status"], "ok");
    assert_eq!(run["details"]["iterations"], 2);

    ok(&[
        "eval",
        "--checkpoint",
        "front/model.ckpt",
        "--manifest",
        m,
        "--split",
        "all",
        "--out",
        "ev/metrics.json",
    ]);
    let metrics = json(&p.join("ev/metrics.json"));
    assert!(metrics["Cardiomegaly"].is_number());
    assert!(metrics["Atelectasis"].is_null());
    assert!(metrics["average"].is_number());
    assert_eq!(metrics["n"]["samples"], 40);

    ok(&[
        "compare",
        "--frontal",
        "front/model.ckpt",
        "--lateral",
        "lat/model.ckpt",
        "--dual",
        "dual/model.ckpt",
        "--manifest",
        m,
        "--split",
        "all",
        "--fuse",
        "max",
        "--out",
        "cmp.csv",
    ]);
    let cmp = fs::read_to_string(p.join("cmp.csv")).unwrap();
    assert!(cmp.starts_with("class,individual,dualnet,dualnet_ge_individual\n"));
    assert_eq!(cmp.lines().count(), 16);

    // Swapped roles are rejected.
    let o = dualnet(
        &[
            "compare",
            "--frontal",
            "lat/model.ckpt",
            "--lateral",
            "front/model.ckpt",
            "--dual",
            "dual/model.ckpt",
            "--manifest",
            m,
            "--out",
            "x.csv",
        ],
        p,
    );
    assert_eq!(code(&o), 1);

    ok(&[
        "lr-range-test",
        "--config",
        "cfg.json",
        "--manifest",
        m,
        "--iters",
        "5",
        "--out",
        "range/trace.csv",
    ]);
    let trace = fs::read_to_string(p.join("range/trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2);
    let run = json(&p.join("range/run-lr-range-test.json"));
    assert!(run["details"]["suggested_max"].is_number());
}
