use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ood_core::detector::{DetectorConfig, StubDetector};
use ood_core::inject::{self, InjectConfig};
use ood_core::metrics;
use ood_core::pcio;
use ood_core::pipeline::{self, LabelingConfig};
use ood_core::scorers::{self, Method};
use ood_core::synth::{write_fixture, SynthConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lidar-ood"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = SynthConfig { frames: 16, ..Default::default() };
    write_fixture(&cfg, &DetectorConfig::default(), dir).unwrap()
}

fn detector(seed: u64) -> StubDetector {
    StubDetector::new(DetectorConfig {
        rng_seed: seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["eval", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let o = run(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&run(&["score", "--method", "nope", "--dataset", "x"])), 1);
    assert_eq!(code(&run(&["inject"])), 1);
}

#[test]
fn randomized_command_without_seed_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, db) = fixture(tmp.path());
    let out = tmp.path().join("out");
    let o = run(&["--out", s(&out), "inject", "--dataset", s(&manifest), "--ood-db", s(&db)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--seed"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["--seed", "1", "--out", s(tmp.path()), "audit", "--dataset", "/nonexistent/dataset.txt"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn inject_matches_library_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, db) = fixture(tmp.path());
    let out = tmp.path().join("cli");
    let o = run(&[
        "--seed", "9", "--quiet", "--out", s(&out), "inject",
        "--dataset", s(&manifest), "--ood-db", s(&db), "--zeta-max", "6",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(o.stdout.is_empty());

    let ds = pcio::load_dataset(&manifest).unwrap();
    let objects = inject::load_ood_database(&db).unwrap();
    let cfg = InjectConfig {
        rng_seed: 9,
        zeta_max: 6,
        ..Default::default()
    };
    let lib = inject::generate_ood_dataset(&ds, &objects, &detector(9), &cfg).unwrap();
    let lib_dir = tmp.path().join("lib");
    inject::save_output(&lib, &lib_dir).unwrap();
    for f in ["dataset.txt", "insertions.txt", "inject_stats.txt"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(lib_dir.join(f)).unwrap(), "{f}");
    }
    assert_eq!(
        pcio::load_dataset(&out.join("dataset.txt")).unwrap(),
        pcio::load_dataset(&lib_dir.join("dataset.txt")).unwrap()
    );
    let trials = fs::read_to_string(out.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), lib.trials.len() + 1);
}

#[test]
fn score_and_eval_match_library() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, db) = fixture(tmp.path());
    let aug = tmp.path().join("aug");
    let o = run(&["--seed", "4", "--out", s(&aug), "inject", "--dataset", s(&manifest), "--ood-db", s(&db)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let aug_manifest = aug.join("dataset.txt");

    let sc = tmp.path().join("sc");
    let o = run(&["--seed", "4", "--out", s(&sc), "score", "--dataset", s(&aug_manifest), "--method", "max_softmax"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cli_rows = scorers::read_scores(&sc.join("scores.csv")).unwrap();

    let ds = pcio::load_dataset(&aug_manifest).unwrap();
    let ins = inject::read_insertions(&aug).unwrap();
    let test = pipeline::collect_test_data(&ds, &ins, &detector(4), &[Method::MaxSoftmax], &[], &LabelingConfig::default()).unwrap();
    let lib_rows = pipeline::score_outputs(&test, Method::MaxSoftmax).unwrap();
    assert_eq!(cli_rows, lib_rows);

    let ev = tmp.path().join("ev");
    let o = run(&["--seed", "8", "--out", s(&ev), "eval", "--scores", s(&sc.join("scores.csv")), "--repeats", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cli_summary = metrics::parse_summary_csv(&fs::read_to_string(ev.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(cli_summary, pipeline::evaluate_scores(&lib_rows, 4, 8).unwrap());
    assert!(ev.join("metrics.txt").exists());
}

#[test]
fn eval_of_id_only_scores_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let rows: Vec<scorers::ScoreRow> = (0..5)
        .map(|i| scorers::ScoreRow {
            frame_id: format!("{i:06}"),
            detection: 0,
            class_label: 0,
            method: Method::MaxSoftmax,
            layer: pipeline::OUTPUT_LAYER.into(),
            score: i as f64 * 0.1,
            is_ood: false,
            source: None,
        })
        .collect();
    let path = tmp.path().join("scores.csv");
    scorers::write_scores(&rows, &path).unwrap();
    // no seed: the data error must win over the missing seed
    let o = run(&["--out", s(&tmp.path().join("ev")), "eval", "--scores", s(&path)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("single-class"), "{}", stderr(&o));
}

#[test]
fn run_from_config_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, db) = fixture(tmp.path());
    let spec = format!(
        "dataset = {:?}\nood_db = {:?}\nrepeats = 1\n[grid]\nmethods = [\"max_softmax\", \"mahalanobis\"]\nlayers = [\"backbone\"]\n[metrics]\nbalance_repeats = 2\n",
        manifest, db
    );
    let cfg = tmp.path().join("spec.toml");
    fs::write(&cfg, spec).unwrap();
    let out = tmp.path().join("run");
    let o = run(&["--seed", "2", "--jobs", "2", "--config", s(&cfg), "--out", s(&out), "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = metrics::parse_summary_csv(&fs::read_to_string(out.join("reports/summary.csv")).unwrap()).unwrap();
    let pooled: Vec<_> = summary.iter().filter(|r| r.source == pipeline::POOLED_SOURCE).collect();
    assert_eq!(pooled.len(), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("AUROC"));
}
