//! `lidar-ood`: run each stage of the OOD toolkit, or a whole experiment.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or validation
//! errors. Machine-readable outputs go under `--out`; a short human summary
//! goes to standard output unless `--quiet` is given.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ood_core::detector::{Detector, DetectorConfig, StubDetector};
use ood_core::featx::LayerTag;
use ood_core::metrics;
use ood_core::pcio::{self, FeatureDump};
use ood_core::pipeline::{self, ExperimentSpec, FitSettings, FrameScorer};
use ood_core::scorers::{self, Method, ScoreRow};
use ood_core::{inject, mine};

#[derive(Parser, Debug)]
#[command(name = "lidar-ood", version, about = "OOD object insertion and OOD scoring for LiDAR detection")]
struct Cli {
    /// Master seed; required by every randomized command unless the config sets one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment spec in TOML. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress the summary on standard output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Insert OOD objects into a dataset.
    Inject(InjectArgs),
    /// Fit a feature-space scorer.
    Fit(FitArgs),
    /// Score the detections of an augmented dataset.
    Score(ScoreArgs),
    /// Class-balanced metrics from a score table.
    Eval(EvalArgs),
    /// mAP, false positives and OOD recall across OOD-score thresholds.
    Sweep(SweepArgs),
    /// Find unusual vehicles among labelled boxes.
    Mine(MineArgs),
    /// Re-check the insertion invariants of an augmented dataset.
    Audit(AuditArgs),
    /// Run a full experiment from a spec.
    Run,
}

#[derive(Args, Debug)]
struct InjectArgs {
    /// Manifest of the dataset to augment.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// OOD object database directory.
    #[arg(long)]
    ood_db: Option<PathBuf>,
    #[arg(long)]
    zeta_max: Option<usize>,
    #[arg(long)]
    gamma_max: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated OOD classes; all database classes by default.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    method: Method,
    /// Training manifest; features are extracted with the configured detector.
    #[arg(long, conflicts_with = "features")]
    dataset: Option<PathBuf>,
    /// Pre-extracted feature dump.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    layer: Option<LayerTag>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Manifest of an augmented dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Fitted model; mutually exclusive with `--method`.
    #[arg(long, conflicts_with = "method")]
    model: Option<PathBuf>,
    /// Output-space method.
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Resampling repeats.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, conflicts_with = "method")]
    model: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    thresholds: Option<Vec<f64>>,
    /// Evenly spaced thresholds over the score range, used without `--thresholds`.
    #[arg(long, default_value_t = 20)]
    steps: usize,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "Car")]
    class: String,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    dataset: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<ood_core::Error> for Failure {
    fn from(e: ood_core::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

macro_rules! data_err {
    ($($t:tt)*) => { |e| Failure::Data(format!("{}", ood_core::Error::from(e))) $($t)* };
}

type Outcome = Result<String, Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

struct Ctx {
    spec: ExperimentSpec,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn seed(&self) -> Result<u64, Failure> {
        match self.seed.or(self.spec.seed) {
            Some(s) => Ok(s),
            None => usage("this command is randomized: pass --seed or set `seed` in the config"),
        }
    }

    fn out(&self) -> Result<&Path, Failure> {
        match &self.out {
            Some(p) => Ok(p),
            None => usage("--out is required"),
        }
    }

    fn detector(&self, seed: u64) -> Result<StubDetector, Failure> {
        let cfg = DetectorConfig {
            rng_seed: seed,
            ..self.spec.detector.clone()
        };
        StubDetector::new(cfg).map_err(data_err!())
    }
}

fn run_inject(ctx: &Ctx, a: &InjectArgs) -> Outcome {
    let out = ctx.out()?;
    let seed = ctx.seed()?;
    let manifest = a.dataset.clone().or_else(|| (!ctx.spec.dataset.as_os_str().is_empty()).then(|| ctx.spec.dataset.clone()));
    let db_dir = a.ood_db.clone().or_else(|| (!ctx.spec.ood_db.as_os_str().is_empty()).then(|| ctx.spec.ood_db.clone()));
    let (Some(manifest), Some(db_dir)) = (manifest, db_dir) else {
        return usage("inject needs --dataset and --ood-db (or both in the config)");
    };
    let mut cfg = ctx.spec.inject.clone();
    cfg.rng_seed = seed;
    if let Some(v) = a.zeta_max {
        cfg.zeta_max = v;
    }
    if let Some(v) = a.gamma_max {
        cfg.gamma_max = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = &a.classes {
        cfg.classes = v.clone();
    }
    let ds = pcio::load_dataset(&manifest).map_err(data_err!())?;
    let db = inject::load_ood_database(&db_dir).map_err(data_err!())?;
    let det = ctx.detector(seed)?;
    let result = inject::generate_ood_dataset(&ds, &db, &det, &cfg).map_err(data_err!())?;
    inject::save_output(&result, out).map_err(data_err!())?;
    let mut trials = String::from("class,frame_id,trial,object_id,outcome\n");
    for t in &result.trials {
        let _ = writeln!(trials, "{},{},{},{},{}", t.class_name, t.frame_id, t.trial, t.object_id, t.outcome.as_str());
    }
    pcio::write_text(&out.join("trials.csv"), &trials).map_err(data_err!())?;
    Ok(format!(
        "inserted {} objects into {} frames\n{}",
        result.insertions.len(),
        result.dataset.frames.len(),
        result.stats.to_text()
    ))
}

fn fit_settings(spec: &ExperimentSpec) -> FitSettings {
    FitSettings {
        mahalanobis: spec.mahalanobis,
        ocsvm: spec.ocsvm,
        flow: spec.flow,
    }
}

fn run_fit(ctx: &Ctx, a: &FitArgs) -> Outcome {
    let out = ctx.out()?;
    if !a.method.needs_features() {
        return usage(format!("{} is an output-space method with nothing to fit", a.method));
    }
    let seed = ctx.seed()?;
    let dump: FeatureDump = match (&a.dataset, &a.features) {
        (_, Some(p)) => {
            let d = pcio::read_feature_dump(p).map_err(data_err!())?;
            if a.layer.is_some_and(|l| l != d.layer) {
                return usage(format!("--layer does not match the dump's layer {}", d.layer));
            }
            d
        }
        (Some(m), None) => {
            let Some(layer) = a.layer else {
                return usage("fitting from a dataset needs --layer");
            };
            let ds = pcio::load_dataset(m).map_err(data_err!())?;
            let det = ctx.detector(seed)?;
            let mut dumps = pipeline::collect_training_features(&ds, &det, &[layer], &ctx.spec.labeling)?;
            let d = dumps.remove(&layer).expect("requested layer");
            pcio::write_feature_dump(&d, &out.join(format!("train_{layer}.bin"))).map_err(data_err!())?;
            d
        }
        (None, None) => return usage("fit needs --dataset or --features"),
    };
    let (model, trace) = pipeline::fit_cell(&dump, a.method, &fit_settings(&ctx.spec), seed)?;
    scorers::write_model(&model, dump.layer, &out.join("model.bin")).map_err(data_err!())?;
    let mut msg = format!("fitted {} on {} {} samples of dimension {}\n", a.method, dump.rows.len(), dump.layer, dump.dim);
    if let Some(t) = trace {
        pcio::write_text(&out.join("loss.csv"), &t.to_csv()).map_err(data_err!())?;
        if let Some((a0, a1)) = t.smoothed_ends(50) {
            let _ = writeln!(msg, "training NLL {a0:.4} -> {a1:.4}");
        }
    }
    Ok(msg)
}

enum Which {
    Output(Method),
    Model(scorers::FittedModel, LayerTag),
}

fn which(model: &Option<PathBuf>, method: Option<Method>) -> Result<Which, Failure> {
    match (model, method) {
        (Some(p), _) => {
            let (m, layer) = scorers::read_model(p).map_err(data_err!())?;
            Ok(Which::Model(m, layer))
        }
        (None, Some(m)) if !m.needs_features() => Ok(Which::Output(m)),
        (None, Some(m)) => usage(format!("{m} needs a fitted --model")),
        (None, None) => usage("give --model or --method"),
    }
}

fn run_score(ctx: &Ctx, a: &ScoreArgs) -> Outcome {
    let out = ctx.out()?;
    let w = which(&a.model, a.method)?;
    let seed = ctx.seed()?;
    let ds = pcio::load_dataset(&a.dataset).map_err(data_err!())?;
    let ins = inject::read_insertions(a.dataset.parent().unwrap_or(Path::new(""))).map_err(data_err!())?;
    let det = ctx.detector(seed)?;
    let rows: Vec<ScoreRow> = match &w {
        Which::Output(m) => {
            let t = pipeline::collect_test_data(&ds, &ins, &det, &[*m], &[], &ctx.spec.labeling)?;
            pipeline::score_outputs(&t, *m)?
        }
        Which::Model(model, layer) => {
            let t = pipeline::collect_test_data(&ds, &ins, &det, &[], &[*layer], &ctx.spec.labeling)?;
            pipeline::score_features(&t, model, model.method(), *layer)?
        }
    };
    scorers::write_scores(&rows, &out.join("scores.csv")).map_err(data_err!())?;
    let n_ood = rows.iter().filter(|r| r.is_ood).count();
    Ok(format!("scored {} detections ({} OOD, {} ID)\n", rows.len(), n_ood, rows.len() - n_ood))
}

fn run_eval(ctx: &Ctx, a: &EvalArgs) -> Outcome {
    let out = ctx.out()?;
    let rows = scorers::read_scores(&a.scores).map_err(data_err!())?;
    // data problems are reported before the seed is demanded
    let mut cells: std::collections::BTreeMap<(Method, &str), (usize, usize)> = Default::default();
    for r in &rows {
        let c = cells.entry((r.method, r.layer.as_str())).or_default();
        if r.is_ood {
            c.1 += 1;
        } else {
            c.0 += 1;
        }
    }
    if cells.is_empty() {
        return Err(Failure::Data(format!("{} holds no scores", a.scores.display())));
    }
    for (&(m, l), &(n_id, n_ood)) in &cells {
        if n_id == 0 || n_ood == 0 {
            let e = metrics::MetricError::SingleClassSet { n_id, n_ood };
            return Err(Failure::Data(format!("{m}/{l}: {e}")));
        }
    }
    let seed = ctx.seed()?;
    let repeats = a.repeats.unwrap_or(ctx.spec.metrics.balance_repeats);
    let summary = pipeline::evaluate_scores(&rows, repeats, seed)?;
    pcio::write_text(&out.join("metrics.csv"), &metrics::format_summary_csv(&summary)).map_err(data_err!())?;
    let table = metrics::format_summary_table(&summary);
    pcio::write_text(&out.join("metrics.txt"), &table).map_err(data_err!())?;
    Ok(table)
}

fn run_sweep(ctx: &Ctx, a: &SweepArgs) -> Outcome {
    let out = ctx.out()?;
    let w = which(&a.model, a.method)?;
    if a.thresholds.is_none() && a.steps < 2 {
        return usage("--steps must be at least 2");
    }
    let seed = ctx.seed()?;
    let ds = pcio::load_dataset(&a.dataset).map_err(data_err!())?;
    let det = ctx.detector(seed)?;
    let scorer = match w {
        Which::Output(m) => FrameScorer::Output(m),
        Which::Model(m, l) => FrameScorer::Model(m, l),
    };
    let frames = pipeline::sweep_frames(&ds, &det, &scorer)?;
    let thresholds = match &a.thresholds {
        Some(t) => t.clone(),
        None => {
            let all: Vec<f64> = frames.iter().flat_map(|f| f.predictions.iter().map(|p| p.ood_score)).collect();
            let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if all.is_empty() {
                return Err(Failure::Data("no detections to sweep".into()));
            }
            (0..a.steps).map(|k| lo + (hi - lo) * k as f64 / (a.steps - 1) as f64).collect()
        }
    };
    let cfg = if ctx.spec.sweep.class_iou.is_empty() {
        metrics::SweepConfig {
            class_iou: metrics::SweepConfig::for_classes(det.classes()).class_iou,
            ..ctx.spec.sweep.clone()
        }
    } else {
        ctx.spec.sweep.clone()
    };
    let rows = metrics::ood_threshold_sweep(&frames, &thresholds, &cfg).map_err(data_err!())?;
    let csv = metrics::format_sweep_csv(&rows);
    pcio::write_text(&out.join("sweep.csv"), &csv).map_err(data_err!())?;
    Ok(csv)
}

fn run_mine(ctx: &Ctx, a: &MineArgs) -> Outcome {
    let out = ctx.out()?;
    let ds = pcio::load_dataset(&a.dataset).map_err(data_err!())?;
    let mut refs = Vec::new();
    let mut boxes = Vec::new();
    for f in &ds.frames {
        for (i, l) in f.labels.iter().enumerate() {
            if l.class_name == a.class && !l.is_ood {
                refs.push((f.id().to_string(), i));
                boxes.push(l.bbox);
            }
        }
    }
    let report = mine::mine_outliers(&boxes, &ctx.spec.mine).map_err(data_err!())?;
    let mut text = report.to_text();
    for &k in &report.outliers {
        let _ = writeln!(text, "outlier frame={} label={}", refs[k].0, refs[k].1);
    }
    pcio::write_text(&out.join("mine.txt"), &text).map_err(data_err!())?;
    Ok(format!("{} of {} {} boxes flagged\n", report.outliers.len(), boxes.len(), a.class))
}

fn run_audit(ctx: &Ctx, a: &AuditArgs) -> Outcome {
    let out = ctx.out()?;
    let report = pipeline::audit_dataset(&a.dataset, &ctx.spec.inject)?;
    let text = report.to_text();
    pcio::write_text(&out.join("audit.txt"), &text).map_err(data_err!())?;
    Ok(text)
}

fn run_run(ctx: &Ctx) -> Outcome {
    let out = ctx.out()?;
    if ctx.spec.dataset.as_os_str().is_empty() {
        return usage("run needs --config with an experiment spec");
    }
    let mut spec = ctx.spec.clone();
    spec.seed = Some(ctx.seed()?);
    let report = pipeline::run_experiment(&spec, out)?;
    let mut msg = metrics::format_summary_table(&report.summary);
    let failed = report.repeats.iter().filter(|r| r.is_err()).count();
    let _ = writeln!(
        msg,
        "{} of {} repeats succeeded; {} stages computed, {} reused",
        report.repeats.len() - failed,
        report.repeats.len(),
        report.computed.len(),
        report.reused.len()
    );
    Ok(msg)
}

fn dispatch(cli: &Cli) -> Outcome {
    let spec = match &cli.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    let ctx = Ctx {
        spec,
        seed: cli.seed,
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Inject(a) => run_inject(&ctx, a),
        Command::Fit(a) => run_fit(&ctx, a),
        Command::Score(a) => run_score(&ctx, a),
        Command::Eval(a) => run_eval(&ctx, a),
        Command::Sweep(a) => run_sweep(&ctx, a),
        Command::Mine(a) => run_mine(&ctx, a),
        Command::Audit(a) => run_audit(&ctx, a),
        Command::Run => run_run(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(summary) => {
            if !cli.quiet {
                print!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nRun `lidar-ood --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
