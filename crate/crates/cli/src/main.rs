//! `dualnet`: data generation, labeling, splitting, training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dualnet_core::checkpoint::{
    load_checkpoint, save_checkpoint, AnyModel, ModelSpec, TrainingMeta,
};
use dualnet_core::classes::View;
use dualnet_core::densenet::{DenseNetConfig, SingleViewModel};
use dualnet_core::dualnet::{DualNetModel, PairKind};
use dualnet_core::labeler::{label_prevalence, write_prevalence_csv, Labeler};
use dualnet_core::manifest::{Manifest, Split};
use dualnet_core::metrics::{compare_dual, evaluate, Fuse};
use dualnet_core::optim::{lr_range_test, write_range_csv, AdamState};
use dualnet_core::split::{split_by_subject, SplitFractions};
use dualnet_core::synth::{generate_synthetic, SyntheticSpec};
use dualnet_core::train::{
    predict_dataset, train, write_loss_csv, Dataset, RangeProbe, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "dualnet",
    version,
    about = "Dual-view chest x-ray classifier pipeline"
)]
struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Where to write the JSON run record (defaults to the command's output directory).
    #[arg(long, global = true)]
    run_record: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: images, reports and a manifest.
    GenerateSynth(GenerateArgs),
    /// Label free-text reports and optionally relabel a manifest.
    Label(LabelArgs),
    /// Assign subjects to train/valid/test and audit prevalence.
    Split(SplitArgs),
    /// Train a single-view or dual-view model.
    Train(TrainArgs),
    /// Sweep the learning rate on a copy of a fresh model.
    LrRangeTest(RangeArgs),
    /// Per-class AUC of a checkpoint.
    Eval(EvalArgs),
    /// Fused single-view models against a dual model on paired studies.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON synthetic spec; the flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    studies: Option<usize>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Directory of `<study_id>.txt` reports.
    #[arg(long)]
    reports: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Manifest whose labels are replaced by the report labels of each study.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    train: f64,
    #[arg(long, default_value_t = 0.1)]
    valid: f64,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    /// Annotated manifest (default: `split_manifest.csv` beside the input).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Prevalence CSV (default: `prevalence.csv` beside the input).
    #[arg(long)]
    prevalence: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Arch {
    Single,
    Dual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitSel {
    Train,
    Valid,
    Test,
    All,
}

impl SplitSel {
    fn filter(self, m: &Manifest) -> Manifest {
        match self {
            SplitSel::Train => m.filter_split(Split::Train),
            SplitSel::Valid => m.filter_split(Split::Valid),
            SplitSel::Test => m.filter_split(Split::Test),
            SplitSel::All => m.clone(),
        }
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Arch::Single)]
    arch: Arch,
    /// View for a single-view model.
    #[arg(long, default_value = "PA")]
    view: String,
    /// Pair kind for a dual model.
    #[arg(long, default_value = "PA_LAT")]
    pair: String,
    /// JSON with optional `model` (DenseNet config) and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSel::Train)]
    split: SplitSel,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_iterations: Option<u64>,
    /// Single-view checkpoints to copy into the dual branches before training.
    #[arg(long, num_args = 2, value_names = ["FRONTAL", "LATERAL"])]
    warm_start: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug)]
struct RangeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    lr_min: f64,
    #[arg(long, default_value_t = 1.0)]
    lr_max: f64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSel::Test)]
    split: SplitSel,
    /// Metrics JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    frontal: PathBuf,
    #[arg(long)]
    lateral: PathBuf,
    #[arg(long)]
    dual: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSel::Test)]
    split: SplitSel,
    #[arg(long, default_value = "mean")]
    fuse: String,
    /// Comparison CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: DenseNetConfig,
    train: TrainConfig,
}

/// What a command reports back for the run record.
struct Outcome {
    out_dir: PathBuf,
    details: Value,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let name = command_name(&cli.command);
    let start = Instant::now();
    let result = run(&cli);
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(outcome) => {
            let record = json!({
                "command": name,
                "seed": cli.seed,
                "status": "ok",
                "duration_seconds": seconds,
                "version": env!("CARGO_PKG_VERSION"),
                "details": outcome.details,
            });
            let path = cli
                .run_record
                .clone()
                .unwrap_or_else(|| outcome.out_dir.join(format!("run-{name}.json")));
            if let Err(e) = write_json(&path, &record) {
                eprintln!("error: {e:#}");
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenerateSynth(_) => "generate-synth",
        Command::Label(_) => "label",
        Command::Split(_) => "split",
        Command::Train(_) => "train",
        Command::LrRangeTest(_) => "lr-range-test",
        Command::Eval(_) => "eval",
        Command::Compare(_) => "compare",
    }
}

/// 2 for filesystem failures, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(d) = cause.downcast_ref::<dualnet_core::Error>() {
            if d.is_io() {
                return 2;
            }
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::GenerateSynth(a) => cmd_generate(a, cli.seed),
        Command::Label(a) => cmd_label(a),
        Command::Split(a) => cmd_split(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::LrRangeTest(a) => cmd_range(a, cli.seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn read_manifest(p: &Path) -> Result<Manifest> {
    Manifest::read(p).with_context(|| format!("reading manifest {}", p.display()))
}

fn cmd_generate(a: &GenerateArgs, seed: u64) -> Result<Outcome> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).context("parsing synthetic spec")?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(n) = a.studies {
        spec.studies = n;
        spec.subjects = spec.subjects.min(n);
    }
    if let Some(n) = a.subjects {
        spec.subjects = n;
    }
    if let Some(s) = a.image_size {
        spec.image_size = s;
    }
    if let Some(s) = a.noise {
        spec.noise_level = s;
    }
    let m = generate_synthetic(&spec, seed, &a.out)?;
    write_json(&a.out.join("synthetic_spec.json"), &spec)?;
    log::info!("wrote {} images to {}", m.rows.len(), a.out.display());
    Ok(Outcome {
        out_dir: a.out.clone(),
        details: json!({ "spec": spec, "images": m.rows.len() }),
    })
}

fn cmd_label(a: &LabelArgs) -> Result<Outcome> {
    let labeler = Labeler::bundled();
    let mut files: Vec<PathBuf> = fs::read_dir(&a.reports)
        .with_context(|| format!("listing {}", a.reports.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    fs::create_dir_all(&a.out)?;
    let mut traces = serde_json::Map::new();
    let mut by_study = std::collections::BTreeMap::new();
    let mut table = String::from("study_id,labels\n");
    for f in &files {
        let study = f
            .file_stem()
            .and_then(|s| s.to_str())
            .context("report file name is not UTF-8")?
            .to_string();
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let r = labeler.label(&text);
        table.push_str(&format!("{study},{}\n", r.labels));
        traces.insert(study.clone(), serde_json::to_value(&r)?);
        by_study.insert(study, r.labels);
    }
    fs::write(a.out.join("labels.csv"), table)?;
    write_json(&a.out.join("mentions.json"), &traces)?;
    let all: Vec<_> = by_study.values().copied().collect();
    let prevalence = label_prevalence(&all);
    write_prevalence_csv(
        &prevalence,
        fs::File::create(a.out.join("label_prevalence.csv"))?,
    )?;
    if let Some(mp) = &a.manifest {
        let mut m = read_manifest(mp)?;
        for r in &mut m.rows {
            match by_study.get(&r.study_id) {
                Some(l) => r.labels = *l,
                None => bail!("study {} has no report", r.study_id),
            }
        }
        m.write_rebased(a.out.join("labeled_manifest.csv"))?;
    }
    Ok(Outcome {
        out_dir: a.out.clone(),
        details: json!({ "reports": files.len(), "prevalence": prevalence }),
    })
}

fn cmd_split(a: &SplitArgs, seed: u64) -> Result<Outcome> {
    let mut m = read_manifest(&a.manifest)?;
    let fractions = SplitFractions {
        train: a.train,
        valid: a.valid,
        test: a.test,
    };
    let (assignment, report) = split_by_subject(&m, &fractions, seed)?;
    assignment.apply(&mut m)?;
    let dir = parent_dir(&a.manifest);
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| dir.join("split_manifest.csv"));
    let prev = a
        .prevalence
        .clone()
        .unwrap_or_else(|| dir.join("prevalence.csv"));
    fs::create_dir_all(parent_dir(&out))?;
    m.write_rebased(&out)
        .with_context(|| format!("writing {}", out.display()))?;
    report.write_csv(
        fs::File::create(&prev).with_context(|| format!("creating {}", prev.display()))?,
    )?;
    let counts: Vec<usize> = Split::ALL
        .iter()
        .map(|&s| assignment.subjects_in(s).len())
        .collect();
    log::info!(
        "subjects per split {counts:?}; max prevalence spread {:.2} pp",
        report.max_deviation_pp
    );
    Ok(Outcome {
        out_dir: parent_dir(&out),
        details: json!({
            "fractions": fractions,
            "subjects": counts,
            "image_fractions": report.image_fractions,
            "max_deviation_pp": report.max_deviation_pp,
        }),
    })
}

fn load_run_config(p: Option<&PathBuf>) -> Result<RunConfig> {
    match p {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).context("parsing run config")?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn build_model(args: &ModelArgs, cfg: &DenseNetConfig, seed: u64) -> Result<AnyModel> {
    Ok(match args.arch {
        Arch::Single => {
            let view: View = args.view.parse()?;
            AnyModel::Single(SingleViewModel::build(cfg, view, seed)?)
        }
        Arch::Dual => {
            let pair: PairKind = args.pair.parse()?;
            AnyModel::Dual(DualNetModel::build(cfg, cfg, pair, seed)?)
        }
    })
}

fn dataset_for(model: &AnyModel, m: &Manifest, side: usize) -> Result<Dataset<f32>> {
    Ok(match model.spec() {
        ModelSpec::Single { view, .. } => Dataset::single_view(m, &[view], side)?,
        ModelSpec::Dual { pair, .. } => Dataset::paired(m, pair, side)?,
    })
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<Outcome> {
    let mut rc = load_run_config(a.model.config.as_ref())?;
    rc.train.seed = seed;
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if a.max_iterations.is_some() {
        rc.train.max_iterations = a.max_iterations;
    }
    let mut model = build_model(&a.model, &rc.model, seed)?;
    if let Some(paths) = &a.warm_start {
        let AnyModel::Dual(dual) = &mut model else {
            bail!("--warm-start applies to --arch dual only");
        };
        let (f, _) = load_checkpoint(&paths[0])
            .with_context(|| format!("reading {}", paths[0].display()))?;
        let (l, _) = load_checkpoint(&paths[1])
            .with_context(|| format!("reading {}", paths[1].display()))?;
        let (AnyModel::Single(f), AnyModel::Single(l)) = (f, l) else {
            bail!("warm-start checkpoints must be single-view models");
        };
        let n = dual.warm_start(&f, &l)?;
        log::info!("warm start copied {n} tensors");
    }
    let manifest = a.model.split.filter(&read_manifest(&a.model.manifest)?);
    let data = dataset_for(&model, &manifest, rc.train.image_side).context("loading images")?;
    log::info!("training on {} samples", data.len());
    let report = train(&mut model, &data, &rc.train)?;
    fs::create_dir_all(&a.out)?;
    let meta = TrainingMeta {
        seed,
        iterations: report.iterations,
        scheduler: Some(report.schedule),
        image_side: Some(rc.train.image_side),
    };
    save_checkpoint(a.out.join("model.ckpt"), &model, &meta)?;
    write_loss_csv(&report.losses, fs::File::create(a.out.join("loss.csv"))?)?;
    let (first, last) = report.head_tail_means(20);
    Ok(Outcome {
        out_dir: a.out.clone(),
        details: json!({
            "config": rc,
            "model": model.spec(),
            "samples": data.len(),
            "iterations": report.iterations,
            "train_seconds": report.seconds,
            "loss_first_20": first,
            "loss_last_20": last,
        }),
    })
}

fn cmd_range(a: &RangeArgs, seed: u64) -> Result<Outcome> {
    let rc = load_run_config(a.model.config.as_ref())?;
    let model = build_model(&a.model, &rc.model, seed)?;
    let manifest = a.model.split.filter(&read_manifest(&a.model.manifest)?);
    let data = dataset_for(&model, &manifest, rc.train.image_side)?;
    let adam = AdamState::new(dualnet_core::train::Classifier::store(&model));
    let probe = RangeProbe::new(model, &data, rc.train.batch_size, seed)?;
    let r = lr_range_test(&probe, adam, a.lr_min, a.lr_max, a.iters)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_range_csv(&r.trace, fs::File::create(&a.out)?)?;
    log::info!(
        "suggested learning-rate bounds {:.3e} .. {:.3e}",
        r.suggested_base,
        r.suggested_max
    );
    Ok(Outcome {
        out_dir: parent_dir(&a.out),
        details: json!({
            "suggested_base": r.suggested_base,
            "suggested_max": r.suggested_max,
            "diverged_at": r.diverged_at,
            "iterations": r.trace.len(),
        }),
    })
}

fn load(p: &Path) -> Result<(AnyModel, TrainingMeta)> {
    load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let (mut model, meta) = load(&a.checkpoint)?;
    let manifest = a.split.filter(&read_manifest(&a.manifest)?);
    let data = dataset_for(&model, &manifest, meta.image_side.unwrap_or(64))?;
    let kind = match model.spec() {
        ModelSpec::Single { view, .. } => view.to_string(),
        ModelSpec::Dual { pair, .. } => pair.to_string(),
    };
    let name = a.checkpoint.display().to_string();
    let report = evaluate(&mut model, &data, &name, &kind)?;
    let j = report.to_json();
    write_json(&a.out, &j)?;
    log::info!(
        "macro AUC {:?} over {} samples",
        report.average,
        report.samples
    );
    Ok(Outcome {
        out_dir: parent_dir(&a.out),
        details: j,
    })
}

fn cmd_compare(a: &CompareArgs) -> Result<Outcome> {
    let fuse: Fuse = a.fuse.parse()?;
    let (mut front, fmeta) = load(&a.frontal)?;
    let (mut lat, lmeta) = load(&a.lateral)?;
    let (mut dual, dmeta) = load(&a.dual)?;
    let pair = match dual.spec() {
        ModelSpec::Dual { pair, .. } => pair,
        _ => bail!("{} is not a dual-view checkpoint", a.dual.display()),
    };
    for (m, p, want) in [
        (&front, &a.frontal, pair.frontal_view()),
        (&lat, &a.lateral, View::Lateral),
    ] {
        match m.spec() {
            ModelSpec::Single { view, .. } if view == want => {}
            _ => bail!("{} is not a single-view {want} checkpoint", p.display()),
        }
    }
    let manifest = a.split.filter(&read_manifest(&a.manifest)?);
    let side = |m: &TrainingMeta| m.image_side.unwrap_or(64);
    let paired = Dataset::paired(&manifest, pair, side(&dmeta))?;
    let as_single = |v: usize, s: usize| -> Result<Dataset<f32>> {
        if s == side(&dmeta) {
            let samples = paired
                .samples
                .iter()
                .map(|x| dualnet_core::train::Sample {
                    views: vec![x.views[v].clone()],
                    ..x.clone()
                })
                .collect();
            Ok(Dataset::new(samples, false)?)
        } else {
            let view = if v == 0 {
                pair.frontal_view()
            } else {
                View::Lateral
            };
            let rows: Vec<_> = dualnet_core::train::pair_rows(&manifest, pair)?
                .into_iter()
                .map(|(f, l)| if v == 0 { f.clone() } else { l.clone() })
                .collect();
            let mut m = Manifest::new(rows);
            m.base_dir = manifest.base_dir.clone();
            Ok(Dataset::single_view(&m, &[view], s)?)
        }
    };
    let fdata = as_single(0, side(&fmeta))?;
    let ldata = as_single(1, side(&lmeta))?;
    let pf = predict_dataset(&mut front, &fdata, 64)?;
    let pl = predict_dataset(&mut lat, &ldata, 64)?;
    let pd = predict_dataset(&mut dual, &paired, 64)?;
    let report = compare_dual(&pf, &pl, &pd, &paired.labels(), fuse)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    report.write_csv(
        fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    )?;
    log::info!(
        "macro AUC individual {:?}, dual {:?}",
        report.individual_average,
        report.dual_average
    );
    Ok(Outcome {
        out_dir: parent_dir(&a.out),
        details: json!({
            "fuse": fuse,
            "studies": paired.len(),
            "individual_average": report.individual_average,
            "dual_average": report.dual_average,
        }),
    })
}
