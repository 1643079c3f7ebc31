use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ood_core::detector::DetectorConfig;
use ood_core::metrics::parse_summary_csv;
use ood_core::pipeline::{audit_dataset, run_experiment, ExperimentSpec, GridConfig, POOLED_SOURCE};
use ood_core::scorers::Method;
use ood_core::synth::{write_fixture, SynthConfig};
use ood_core::featx::LayerTag;

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn fixture(dir: &Path, frames: usize) -> ExperimentSpec {
    let cfg = SynthConfig { frames, ..Default::default() };
    let (manifest, db) = write_fixture(&cfg, &DetectorConfig::default(), dir).unwrap();
    let mut spec: ExperimentSpec = toml::from_str(
        r#"
        dataset = "x"
        ood_db = "x"
        seed = 11
        repeats = 1
        [inject]
        zeta_max = 10
        [flow.model]
        layers = 4
        hidden = 16
        [flow.train]
        steps = 300
        [metrics]
        balance_repeats = 3
        "#,
    )
    .unwrap();
    spec.dataset = manifest;
    spec.ood_db = db;
    spec
}

#[test]
fn output_only_grid_skips_feature_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = fixture(tmp.path(), 20);
    spec.grid = GridConfig {
        methods: vec![Method::MaxSoftmax],
        layers: vec![LayerTag::Backbone],
    };
    let run = tmp.path().join("run");
    let rep = run_experiment(&spec, &run).unwrap();
    assert!(!run.join("features").exists());
    assert!(!run.join("models").exists());
    assert_eq!(rep.summary.iter().filter(|r| r.source == POOLED_SOURCE).count(), 1);
}

#[test]
fn rerun_reuses_every_stage_and_reports_match() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = fixture(tmp.path(), 24);
    spec.grid = GridConfig {
        methods: vec![Method::MaxSoftmax, Method::Mahalanobis, Method::Flow],
        layers: vec![LayerTag::Backbone],
    };
    let run = tmp.path().join("run");
    let first = run_experiment(&spec, &run).unwrap();
    assert!(!first.computed.is_empty());
    let before = tree(&run.join("reports"));
    let second = run_experiment(&spec, &run).unwrap();
    assert!(second.computed.is_empty(), "{:?}", second.computed);
    assert_eq!(second.reused.len(), first.computed.len());
    assert_eq!(tree(&run.join("reports")), before);
    assert_eq!(first.summary, second.summary);
}

#[test]
fn generated_dataset_passes_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = fixture(tmp.path(), 20);
    spec.grid = GridConfig {
        methods: vec![Method::MaxSoftmax],
        layers: vec![],
    };
    let run = tmp.path().join("run");
    run_experiment(&spec, &run).unwrap();
    let ds_dir = fs::read_dir(run.join("datasets")).unwrap().next().unwrap().unwrap().path();
    let report = audit_dataset(&ds_dir.join("dataset.txt"), &spec.inject).unwrap();
    assert!(report.checked > 0);
    assert!(report.violations.is_empty(), "{}", report.to_text());
}

#[test]
fn missing_seed_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = fixture(tmp.path(), 2);
    spec.seed = None;
    assert!(run_experiment(&spec, &tmp.path().join("run")).is_err());
}

#[test]
fn summary_matches_recomputation_from_repeat_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = fixture(tmp.path(), 20);
    spec.repeats = 3;
    spec.grid = GridConfig {
        methods: vec![Method::MaxSoftmax, Method::MutualInformation],
        layers: vec![],
    };
    let run = tmp.path().join("run");
    run_experiment(&spec, &run).unwrap();
    let reports = run.join("reports");
    let summary = parse_summary_csv(&fs::read_to_string(reports.join("summary.csv")).unwrap()).unwrap();
    let mut per_cell: BTreeMap<(String, String, String), Vec<[f64; 5]>> = BTreeMap::new();
    for r in 0..3 {
        for row in parse_summary_csv(&fs::read_to_string(reports.join(format!("repeat_{r}.csv"))).unwrap()).unwrap() {
            per_cell.entry((row.method, row.layer, row.source)).or_default().push(row.mean.to_array());
        }
    }
    assert_eq!(per_cell.len(), summary.len());
    for row in &summary {
        let vals = &per_cell[&(row.method.clone(), row.layer.clone(), row.source.clone())];
        assert_eq!(row.repeats, vals.len());
        for k in 0..5 {
            let xs: Vec<f64> = vals.iter().map(|v| v[k]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
            assert!((row.mean.to_array()[k] - mean).abs() < 1e-12);
            assert!((row.sd.to_array()[k] - sd).abs() < 1e-12);
        }
    }
}
