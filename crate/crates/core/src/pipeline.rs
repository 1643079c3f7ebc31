//! Experiment orchestration.
//!
//! A run directory holds `datasets/`, `features/`, `models/`, `scores/` and
//! `reports/`. Every stage output lives in a directory named by the hash of
//! everything that determines it, and is written to a scratch directory
//! that is renamed into place once complete. A stage whose directory
//! already exists is loaded instead of recomputed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, DetectorConfig, StubDetector};
use crate::featx::{extract_test_samples, extract_training_samples, group_by_class, LayerTag, SampleSource};
use crate::flow::{self, FlowConfig, FlowModel, TrainConfig};
use crate::geometry::bev_iou;
use crate::inject::{self, AuditReport, InjectConfig, InsertionRecord};
use crate::metrics::{self, ScoredEntry, ScoredSet, SummaryRow, SweepConfig, SweepFrame, SweepGt, SweepPrediction};
use crate::mine::MineConfig;
use crate::pcio::{self, Dataset, FeatureDump, OodSource, PcioError};
use crate::scorers::{self, FittedModel, MahalanobisConfig, Method, OcSvmConfig, ScoreRow};
use crate::{seed, Error, Result};

/// Which (method, layer) cells to evaluate. Output-space methods ignore
/// `layers` and are reported once under the `output` layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub methods: Vec<Method>,
    pub layers: Vec<LayerTag>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            layers: LayerTag::MAPS.to_vec(),
        }
    }
}

/// A scored cell of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub method: Method,
    pub layer: Option<LayerTag>,
}

impl Cell {
    pub fn layer_name(&self) -> &'static str {
        self.layer.map_or(OUTPUT_LAYER, LayerTag::as_str)
    }
}

pub const OUTPUT_LAYER: &str = "output";
pub const POOLED_SOURCE: &str = "all";

impl GridConfig {
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = BTreeSet::new();
        for &m in &self.methods {
            if m.needs_features() {
                for &l in &self.layers {
                    cells.insert(Cell { method: m, layer: Some(l) });
                }
            } else {
                cells.insert(Cell { method: m, layer: None });
            }
        }
        cells.into_iter().collect()
    }

    pub fn feature_layers(&self) -> Vec<LayerTag> {
        let mut l: Vec<LayerTag> = self
            .cells()
            .iter()
            .filter_map(|c| c.layer)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        l.sort();
        l
    }

    pub fn output_methods(&self) -> Vec<Method> {
        self.cells().iter().filter(|c| c.layer.is_none()).map(|c| c.method).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSpec {
    pub model: FlowConfig,
    pub train: TrainConfig,
}

/// How test detections are labelled against the augmented ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    /// BEV IoU with an OOD object that makes a detection OOD.
    pub ood_iou: f64,
    /// BEV IoU with an ID object that makes a detection ID.
    pub id_iou: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self { ood_iou: 0.3, id_iou: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Class-balanced resampling repeats per evaluation.
    pub balance_repeats: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { balance_repeats: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// In-distribution manifest the scorers are trained on.
    #[serde(default)]
    pub dataset: PathBuf,
    /// Manifest OOD objects are inserted into; defaults to `dataset`.
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    #[serde(default)]
    pub ood_db: PathBuf,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub inject: InjectConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub mahalanobis: MahalanobisConfig,
    #[serde(default)]
    pub ocsvm: OcSvmConfig,
    #[serde(default)]
    pub flow: FlowSpec,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub mine: MineConfig,
}

fn default_repeats() -> usize {
    3
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            eval_dataset: None,
            ood_db: PathBuf::new(),
            repeats: default_repeats(),
            seed: None,
            detector: DetectorConfig::default(),
            inject: InjectConfig::default(),
            grid: GridConfig::default(),
            mahalanobis: MahalanobisConfig::default(),
            ocsvm: OcSvmConfig::default(),
            flow: FlowSpec::default(),
            labeling: LabelingConfig::default(),
            metrics: MetricConfig::default(),
            sweep: SweepConfig::default(),
            mine: MineConfig::default(),
        }
    }
}

impl ExperimentSpec {
    /// Reads a TOML spec. Relative paths are taken from the spec's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = pcio::read_text(path)?;
        let mut spec: ExperimentSpec =
            toml::from_str(&text).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut spec.dataset);
        fix(&mut spec.ood_db);
        if let Some(p) = spec.eval_dataset.as_mut() {
            fix(p);
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn eval_manifest(&self) -> &Path {
        self.eval_dataset.as_deref().unwrap_or(&self.dataset)
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Spec("a master seed is required".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.master_seed()?;
        if self.repeats == 0 {
            return Err(Error::Spec("repeats must be at least 1".into()));
        }
        if self.grid.methods.is_empty() {
            return Err(Error::Spec("the method grid is empty".into()));
        }
        if self.grid.methods.iter().any(|m| m.needs_features()) && self.grid.layers.is_empty() {
            return Err(Error::Spec("feature methods need at least one layer".into()));
        }
        if self.metrics.balance_repeats == 0 {
            return Err(Error::Spec("balance_repeats must be at least 1".into()));
        }
        for p in [&self.dataset, &self.ood_db, &self.eval_manifest().to_path_buf()] {
            if p.as_os_str().is_empty() || !p.exists() {
                return Err(Error::Spec(format!("{} does not exist", p.display())));
            }
        }
        self.detector.validate()?;
        self.inject.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Content-addressed stages

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex(&h.finalize()[..8])
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(PcioError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// Hash of a manifest and every file it references.
pub fn hash_dataset(manifest: &Path) -> Result<String> {
    let m = pcio::read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut h = Sha256::new();
    h.update(read_bytes(manifest)?);
    for f in &m.frames {
        h.update(read_bytes(&base.join(&f.cloud_path))?);
        h.update(read_bytes(&base.join(&f.label_path))?);
    }
    Ok(hex(&h.finalize()))
}

/// Hash of a database index and every object cloud.
pub fn hash_ood_db(dir: &Path) -> Result<String> {
    let recs = pcio::read_ood_db(dir)?;
    let mut h = Sha256::new();
    h.update(read_bytes(&dir.join(pcio::OOD_DB_FILE))?);
    for r in &recs {
        let p = if r.cloud_path.is_absolute() {
            r.cloud_path.clone()
        } else {
            dir.join(&r.cloud_path)
        };
        h.update(read_bytes(&p)?);
    }
    Ok(hex(&h.finalize()))
}

const DONE: &str = "DONE";

#[derive(Debug, Default)]
struct StageLog {
    computed: Vec<String>,
    reused: Vec<String>,
}

struct Stages {
    root: PathBuf,
    log: Mutex<StageLog>,
}

impl Stages {
    /// Returns the stage directory, computing it first if it is missing.
    fn ensure(&self, kind: &str, key: &str, compute: impl FnOnce(&Path) -> Result<()>) -> Result<(PathBuf, String)> {
        let hash = digest(&[kind, key]);
        let dir = self.root.join(kind).join(&hash);
        let name = format!("{kind}/{hash}");
        if dir.join(DONE).exists() {
            self.log.lock().unwrap().reused.push(name);
            return Ok((dir, hash));
        }
        let tmp = self.root.join(kind).join(format!("{hash}.partial"));
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |e| Error::Io(PcioError::Io { path: p, source: e })
        };
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io(&tmp))?;
        compute(&tmp)?;
        pcio::write_text(&tmp.join(DONE), key)?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io(&dir))?;
        }
        fs::rename(&tmp, &dir).map_err(io(&dir))?;
        self.log.lock().unwrap().computed.push(name);
        Ok((dir, hash))
    }
}

// ---------------------------------------------------------------------------
// Detection-side data

/// One labelled test detection.
#[derive(Clone, Debug, PartialEq)]
pub struct TestItem {
    pub frame_id: String,
    pub detection: usize,
    pub class_label: usize,
    pub is_ood: bool,
    pub source: Option<OodSource>,
}

/// Labelled test detections with their output-space scores and features.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TestData {
    pub items: Vec<TestItem>,
    /// Per output method, one score per item.
    pub output_scores: BTreeMap<Method, Vec<f64>>,
    /// Per layer, one vector per item.
    pub features: BTreeMap<LayerTag, FeatureDump>,
}

/// Runs the detector over `frames` in parallel, keeping frame order.
fn detect_all<T: Send>(
    ds: &Dataset,
    det: &dyn Detector,
    f: impl Fn(usize, &crate::detector::DetectorOutput) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    ds.frames
        .par_iter()
        .enumerate()
        .map(|(i, fr)| {
            let out = det.detect(&fr.cloud)?;
            f(i, &out)
        })
        .collect()
}

fn class_index(classes: &[String], name: &str) -> Option<usize> {
    classes.iter().position(|c| c == name)
}

/// Per-layer training samples: features at positive anchors of the ID
/// labels, or for the logit layer, logits of detections matching an ID label.
pub fn collect_training_features(
    ds: &Dataset,
    det: &dyn Detector,
    layers: &[LayerTag],
    labeling: &LabelingConfig,
) -> Result<BTreeMap<LayerTag, FeatureDump>> {
    let classes = det.classes().to_vec();
    let per_frame = detect_all(ds, det, |i, out| {
        let fr = &ds.frames[i];
        let id_labels: Vec<_> = fr.labels.iter().filter(|l| !l.is_ood).cloned().collect();
        let mut per_layer = Vec::new();
        for &layer in layers {
            let samples = if layer == LayerTag::Logits {
                let mut v = Vec::new();
                for d in &out.detections {
                    let hit = id_labels
                        .iter()
                        .filter(|l| bev_iou(&d.bbox, &l.bbox) >= labeling.id_iou)
                        .find_map(|l| class_index(&classes, &l.class_name));
                    if let (Some(c), Some(logits)) = (hit, d.logits.as_ref()) {
                        v.push(crate::featx::FeatureSample {
                            vector: logits.iter().map(|&x| x as f32).collect(),
                            class_label: c,
                            is_ood: false,
                            source: SampleSource::Prediction,
                            frame_id: fr.id().to_string(),
                            layer,
                        });
                    }
                }
                v
            } else {
                extract_training_samples(out, &id_labels, &classes, det.anchor_grid(), layer, fr.id())?
            };
            per_layer.push(samples);
        }
        Ok(per_layer)
    })?;
    let mut out = BTreeMap::new();
    for (k, &layer) in layers.iter().enumerate() {
        let samples: Vec<_> = per_frame.iter().flat_map(|f| f[k].iter().cloned()).collect();
        let dim = samples.first().map_or(0, |s| s.vector.len());
        out.insert(layer, FeatureDump::from_samples(&samples, layer, dim, classes.len() as u32)?);
    }
    Ok(out)
}

/// Detects on the augmented frames and labels each detection: OOD when it
/// overlaps an OOD object at `ood_iou`, ID when it overlaps an ID object at
/// `id_iou`, dropped otherwise.
pub fn collect_test_data(
    ds: &Dataset,
    insertions: &[InsertionRecord],
    det: &dyn Detector,
    output_methods: &[Method],
    layers: &[LayerTag],
    labeling: &LabelingConfig,
) -> Result<TestData> {
    let source_of: BTreeMap<(&str, usize), OodSource> = insertions
        .iter()
        .map(|r| ((r.frame_id.as_str(), r.label_index), r.source))
        .collect();
    type FrameRows = (Vec<TestItem>, Vec<Vec<f64>>, Vec<Vec<Vec<f32>>>);
    let per_frame: Vec<FrameRows> = detect_all(ds, det, |i, out| {
        let fr = &ds.frames[i];
        let mut items = Vec::new();
        let mut kept = Vec::new();
        for (k, d) in out.detections.iter().enumerate() {
            let ood = fr
                .labels
                .iter()
                .enumerate()
                .find(|(_, l)| l.is_ood && bev_iou(&d.bbox, &l.bbox) >= labeling.ood_iou);
            let is_ood = if let Some((li, _)) = ood {
                items.push(TestItem {
                    frame_id: fr.id().to_string(),
                    detection: k,
                    class_label: d.predicted_class,
                    is_ood: true,
                    source: source_of.get(&(fr.id(), li)).copied(),
                });
                true
            } else if fr
                .labels
                .iter()
                .any(|l| !l.is_ood && bev_iou(&d.bbox, &l.bbox) >= labeling.id_iou)
            {
                items.push(TestItem {
                    frame_id: fr.id().to_string(),
                    detection: k,
                    class_label: d.predicted_class,
                    is_ood: false,
                    source: None,
                });
                false
            } else {
                continue;
            };
            let _ = is_ood;
            kept.push(k);
        }
        let mut outputs = Vec::new();
        for &m in output_methods {
            let mut v = Vec::with_capacity(kept.len());
            for &k in &kept {
                let mc = out.mc_softmax_samples.as_ref().map(|s| s[k].as_slice());
                let s = scorers::score_output(m, &out.detections[k], mc).ok_or_else(|| {
                    Error::Spec(format!("{m} needs MC softmax samples; set detector.mc_samples above 0"))
                })?;
                v.push(s);
            }
            outputs.push(v);
        }
        let mut feats = Vec::new();
        for &layer in layers {
            let samples = extract_test_samples(out, layer, fr.id())?;
            feats.push(kept.iter().map(|&k| samples[k].vector.clone()).collect());
        }
        Ok((items, outputs, feats))
    })?;
    let mut data = TestData::default();
    for (items, _, _) in &per_frame {
        data.items.extend(items.iter().cloned());
    }
    for (j, &m) in output_methods.iter().enumerate() {
        data.output_scores
            .insert(m, per_frame.iter().flat_map(|f| f.1[j].iter().copied()).collect());
    }
    let n_classes = det.classes().len() as u32;
    for (j, &layer) in layers.iter().enumerate() {
        let mut rows = Vec::with_capacity(data.items.len());
        let mut at = 0;
        for f in &per_frame {
            for v in &f.2[j] {
                let item = &data.items[at];
                rows.push(pcio::DumpRow {
                    class_label: item.class_label as u32,
                    is_ood: item.is_ood,
                    vector: v.clone(),
                });
                at += 1;
            }
        }
        let dim = rows.first().map_or(0, |r| r.vector.len());
        data.features.insert(
            layer,
            FeatureDump {
                layer,
                dim,
                class_count: n_classes,
                rows,
            },
        );
    }
    Ok(data)
}

const INDEX_HEADER: &str = "frame_id,detection,class,is_ood,source";

fn format_index(items: &[TestItem]) -> String {
    let mut s = format!("{INDEX_HEADER}\n");
    for it in items {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            it.frame_id,
            it.detection,
            it.class_label,
            u8::from(it.is_ood),
            it.source.map_or("-", OodSource::as_str)
        );
    }
    s
}

fn parse_index(text: &str) -> Result<Vec<TestItem>> {
    let bad = |l: &str| Error::Spec(format!("corrupt test index line '{l}'"));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            Ok(TestItem {
                frame_id: f[0].to_string(),
                detection: f[1].parse().map_err(|_| bad(l))?,
                class_label: f[2].parse().map_err(|_| bad(l))?,
                is_ood: f[3] == "1",
                source: OodSource::parse(f[4]),
            })
        })
        .collect()
}

impl TestData {
    pub fn save(&self, dir: &Path) -> Result<()> {
        pcio::write_text(&dir.join("test_index.csv"), &format_index(&self.items))?;
        for (m, v) in &self.output_scores {
            let text: String = v.iter().map(|s| format!("{s:e}\n")).collect();
            pcio::write_text(&dir.join(format!("output_{m}.txt")), &text)?;
        }
        for (l, d) in &self.features {
            pcio::write_feature_dump(d, &dir.join(format!("test_{l}.bin")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, output_methods: &[Method], layers: &[LayerTag]) -> Result<Self> {
        let items = parse_index(&pcio::read_text(&dir.join("test_index.csv"))?)?;
        let mut output_scores = BTreeMap::new();
        for &m in output_methods {
            let p = dir.join(format!("output_{m}.txt"));
            let v = pcio::read_text(&p)?
                .lines()
                .map(|l| l.parse::<f64>().map_err(|_| Error::Spec(format!("corrupt score in {}", p.display()))))
                .collect::<Result<Vec<_>>>()?;
            output_scores.insert(m, v);
        }
        let mut features = BTreeMap::new();
        for &l in layers {
            features.insert(l, pcio::read_feature_dump(&dir.join(format!("test_{l}.bin")))?);
        }
        Ok(Self {
            items,
            output_scores,
            features,
        })
    }
}

// ---------------------------------------------------------------------------
// Fitting and scoring

/// Scorer settings needed to fit a feature-space cell.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FitSettings {
    pub mahalanobis: MahalanobisConfig,
    pub ocsvm: OcSvmConfig,
    pub flow: FlowSpec,
}

/// Drops classes with too few samples for `method`, with a warning.
fn usable_groups(dump: &FeatureDump, method: Method) -> BTreeMap<usize, Vec<Vec<f64>>> {
    let mut groups = group_by_class(&dump.to_samples(SampleSource::GtAnchor));
    let need = match method {
        Method::Mahalanobis => dump.dim + 1,
        Method::OcSvm => scorers::OCSVM_MIN_SAMPLES,
        _ => 1,
    };
    groups.retain(|c, v| {
        let ok = v.len() >= need;
        if !ok {
            log::warn!("{method}/{}: class {c} has {} samples, need {need}; skipped", dump.layer, v.len());
        }
        ok
    });
    groups
}

/// Fits one feature-space scorer on a training dump.
pub fn fit_cell(dump: &FeatureDump, method: Method, settings: &FitSettings, seed_: u64) -> Result<(FittedModel, Option<flow::LossTrace>)> {
    match method {
        Method::Mahalanobis => {
            let g = usable_groups(dump, method);
            Ok((FittedModel::Mahalanobis(scorers::fit_mahalanobis(&g, &settings.mahalanobis)?), None))
        }
        Method::OcSvm => {
            let g = usable_groups(dump, method);
            let cfg = OcSvmConfig { seed: seed_, ..settings.ocsvm };
            Ok((FittedModel::OcSvm(scorers::fit_ocsvm(&g, &cfg)?), None))
        }
        Method::Flow => {
            let all: Vec<Vec<f64>> = dump
                .rows
                .iter()
                .map(|r| r.vector.iter().map(|&v| f64::from(v)).collect())
                .collect();
            let init = FlowModel::new(dump.dim, settings.flow.model, seed::derive(seed_, 0))?;
            let train = TrainConfig {
                seed: seed::derive(seed_, 1),
                ..settings.flow.train
            };
            let (m, trace) = flow::fit(&init, &all, &train)?;
            Ok((FittedModel::Flow(m), Some(trace)))
        }
        other => Err(Error::Spec(format!("{other} has nothing to fit"))),
    }
}

/// Scores every test item of a feature cell.
pub fn score_features(test: &TestData, model: &FittedModel, method: Method, layer: LayerTag) -> Result<Vec<ScoreRow>> {
    let dump = test
        .features
        .get(&layer)
        .ok_or_else(|| Error::Spec(format!("no test features for layer {layer}")))?;
    let scores: Vec<f64> = dump
        .rows
        .par_iter()
        .map(|r| {
            let x: Vec<f64> = r.vector.iter().map(|&v| f64::from(v)).collect();
            model.score(&x)
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(rows_for(test, method, layer.as_str(), &scores))
}

pub fn score_outputs(test: &TestData, method: Method) -> Result<Vec<ScoreRow>> {
    let s = test
        .output_scores
        .get(&method)
        .ok_or_else(|| Error::Spec(format!("no output scores for {method}")))?;
    Ok(rows_for(test, method, OUTPUT_LAYER, s))
}

fn rows_for(test: &TestData, method: Method, layer: &str, scores: &[f64]) -> Vec<ScoreRow> {
    test.items
        .iter()
        .zip(scores)
        .map(|(it, &score)| ScoreRow {
            frame_id: it.frame_id.clone(),
            detection: it.detection,
            class_label: it.class_label,
            method,
            layer: layer.to_string(),
            score,
            is_ood: it.is_ood,
            source: it.source,
        })
        .collect()
}

/// Balanced metrics per (method, layer) cell, pooled over sources and per
/// source. Sources without OOD entries are skipped.
pub fn evaluate_scores(rows: &[ScoreRow], balance_repeats: usize, seed_: u64) -> Result<Vec<SummaryRow>> {
    let mut cells: BTreeMap<(String, String), Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.method.to_string(), r.layer.clone())).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((method, layer), rs) in cells {
        let sources: BTreeSet<OodSource> = rs.iter().filter_map(|r| r.source).collect();
        let mut groups: Vec<(String, Option<OodSource>)> = vec![(POOLED_SOURCE.to_string(), None)];
        groups.extend(sources.iter().map(|s| (s.as_str().to_string(), Some(*s))));
        for (name, src) in groups {
            let entries: Vec<ScoredEntry> = rs
                .iter()
                .filter(|r| !r.is_ood || src.is_none() || r.source == src)
                .map(|r| ScoredEntry {
                    score: r.score,
                    is_ood: r.is_ood,
                    class_label: r.class_label,
                    frame_id: r.frame_id.clone(),
                })
                .collect();
            let set = ScoredSet::new(entries)?;
            let s = seed::derive_path(seed_, &[seed::name_tag(&method), seed::name_tag(&layer), seed::name_tag(&name)]);
            let rep = match metrics::balanced_eval(&set, balance_repeats, s) {
                Ok(r) => r,
                Err(e) if src.is_some() => {
                    log::warn!("{method}/{layer}/{name}: {e}; skipped");
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            out.push(SummaryRow {
                method: method.clone(),
                layer: layer.clone(),
                source: name,
                mean: rep.mean,
                sd: rep.sd,
                repeats: 1,
            });
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation across repeats of each row's means.
pub fn summarize_repeats(per_repeat: &[Vec<SummaryRow>]) -> Vec<SummaryRow> {
    let mut acc: BTreeMap<(String, String, String), Vec<metrics::MetricValues>> = BTreeMap::new();
    for rows in per_repeat {
        for r in rows {
            acc.entry((r.method.clone(), r.layer.clone(), r.source.clone()))
                .or_default()
                .push(r.mean);
        }
    }
    acc.into_iter()
        .map(|((method, layer, source), vals)| {
            let (mean, sd) = metrics::summarize(&vals);
            SummaryRow {
                method,
                layer,
                source,
                mean,
                sd,
                repeats: vals.len(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    /// Mean and standard deviation over successful repeats.
    pub summary: Vec<SummaryRow>,
    /// Per repeat, its metric rows or the error that stopped it.
    pub repeats: Vec<std::result::Result<Vec<SummaryRow>, String>>,
    /// Stage directories computed during this run.
    pub computed: Vec<String>,
    /// Stage directories found complete and reused.
    pub reused: Vec<String>,
}

struct RepeatCtx<'a> {
    spec: &'a ExperimentSpec,
    stages: &'a Stages,
    train_hash: &'a str,
    eval_hash: &'a str,
    db_hash: &'a str,
}

fn run_repeat(ctx: &RepeatCtx, r: usize) -> Result<(Vec<SummaryRow>, String)> {
    let spec = ctx.spec;
    let seed_r = seed::derive(spec.master_seed()?, r as u64);
    let det_cfg = DetectorConfig {
        rng_seed: seed::derive(seed_r, seed::stage::DETECT),
        ..spec.detector.clone()
    };
    let inj_cfg = InjectConfig {
        rng_seed: seed::derive(seed_r, seed::stage::INJECT),
        ..spec.inject.clone()
    };
    let det = StubDetector::new(det_cfg.clone())?;
    let det_key = format!("{det_cfg:?}");
    let layers = spec.grid.feature_layers();
    let out_methods = spec.grid.output_methods();
    let cells = spec.grid.cells();

    let (ds_dir, ds_hash) = ctx.stages.ensure(
        "datasets",
        &[ctx.eval_hash, ctx.db_hash, &det_key, &format!("{inj_cfg:?}")].join("\n"),
        |dir| {
            let ds = pcio::load_dataset(spec.eval_manifest())?;
            let db = inject::load_ood_database(&spec.ood_db)?;
            let out = inject::generate_ood_dataset(&ds, &db, &det, &inj_cfg)?;
            inject::save_output(&out, dir)?;
            Ok(())
        },
    )?;
    let aug = pcio::load_dataset(&ds_dir.join(pcio::MANIFEST_FILE))?;
    let insertions = inject::read_insertions(&ds_dir)?;
    let stats = pcio::read_text(&ds_dir.join(inject::STATS_FILE))?;

    let labeling_key = format!("{:?}", spec.labeling);
    let test_key = [&ds_hash, det_key.as_str(), &format!("{out_methods:?}{layers:?}"), &labeling_key].join("\n");
    let mut rows: Vec<ScoreRow> = Vec::new();
    let mut model_hashes = Vec::new();
    let test = if layers.is_empty() {
        None
    } else {
        let (train_dir, train_hash) = ctx.stages.ensure(
            "features",
            &["train", ctx.train_hash, &det_key, &format!("{layers:?}"), &labeling_key].join("\n"),
            |dir| {
                let ds = pcio::load_dataset(&spec.dataset)?;
                for (l, d) in collect_training_features(&ds, &det, &layers, &spec.labeling)? {
                    pcio::write_feature_dump(&d, &dir.join(format!("train_{l}.bin")))?;
                }
                Ok(())
            },
        )?;
        let (test_dir, test_hash) = ctx.stages.ensure("features", &format!("test\n{test_key}"), |dir| {
            collect_test_data(&aug, &insertions, &det, &out_methods, &layers, &spec.labeling)?.save(dir)
        })?;
        let test = TestData::load(&test_dir, &out_methods, &layers)?;
        let settings = FitSettings {
            mahalanobis: spec.mahalanobis,
            ocsvm: spec.ocsvm,
            flow: spec.flow,
        };
        let feature_cells: Vec<Cell> = cells.iter().filter(|c| c.layer.is_some()).copied().collect();
        let fitted: Vec<(Vec<ScoreRow>, String)> = feature_cells
            .par_iter()
            .map(|c| {
                let layer = c.layer.unwrap();
                let fit_seed = seed::derive_path(seed_r, &[seed::stage::FIT, seed::name_tag(c.method.as_str()), seed::name_tag(layer.as_str())]);
                let cfg_key = match c.method {
                    Method::Mahalanobis => format!("{:?}", settings.mahalanobis),
                    Method::OcSvm => format!("{:?}", settings.ocsvm),
                    _ => format!("{:?}", settings.flow),
                };
                let key = [&train_hash, c.method.as_str(), layer.as_str(), &cfg_key, &fit_seed.to_string()].join("\n");
                let (mdir, mhash) = ctx.stages.ensure("models", &key, |dir| {
                    let dump = pcio::read_feature_dump(&train_dir.join(format!("train_{layer}.bin")))?;
                    let (model, trace) = fit_cell(&dump, c.method, &settings, fit_seed)?;
                    scorers::write_model(&model, layer, &dir.join("model.bin"))?;
                    if let Some(t) = trace {
                        pcio::write_text(&dir.join("loss.csv"), &t.to_csv())?;
                    }
                    Ok(())
                })?;
                let (model, _) = scorers::read_model(&mdir.join("model.bin"))?;
                Ok((score_features(&test, &model, c.method, layer)?, mhash))
            })
            .collect::<Result<_>>()?;
        for (rs, h) in fitted {
            rows.extend(rs);
            model_hashes.push(h);
        }
        model_hashes.push(test_hash);
        Some(test)
    };

    let eval_seed = seed::derive(seed_r, seed::stage::EVAL);
    let score_key = [
        test_key.as_str(),
        &model_hashes.join(","),
        &format!("{:?}", spec.metrics),
        &eval_seed.to_string(),
    ]
    .join("\n");
    let (score_dir, _) = ctx.stages.ensure("scores", &score_key, |dir| {
        let test = match test {
            Some(t) => t,
            None => collect_test_data(&aug, &insertions, &det, &out_methods, &[], &spec.labeling)?,
        };
        let mut all = Vec::new();
        for &m in &out_methods {
            all.extend(score_outputs(&test, m)?);
        }
        all.extend(rows);
        scorers::write_scores(&all, &dir.join("scores.csv"))?;
        let summary = evaluate_scores(&all, spec.metrics.balance_repeats, eval_seed)?;
        pcio::write_text(&dir.join("metrics.csv"), &metrics::format_summary_csv(&summary))?;
        Ok(())
    })?;
    let text = pcio::read_text(&score_dir.join("metrics.csv"))?;
    let rows = metrics::parse_summary_csv(&text).map_err(Error::Spec)?;
    Ok((rows, stats))
}

/// Runs every repeat of `spec` under `out`. A failing repeat is recorded
/// and the others continue; the call fails only when every repeat fails.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentReport> {
    spec.validate()?;
    let stages = Stages {
        root: out.to_path_buf(),
        log: Mutex::new(StageLog::default()),
    };
    let train_hash = hash_dataset(&spec.dataset)?;
    let eval_hash = hash_dataset(spec.eval_manifest())?;
    let db_hash = hash_ood_db(&spec.ood_db)?;
    let ctx = RepeatCtx {
        spec,
        stages: &stages,
        train_hash: &train_hash,
        eval_hash: &eval_hash,
        db_hash: &db_hash,
    };
    let results: Vec<Result<(Vec<SummaryRow>, String)>> = (0..spec.repeats).into_par_iter().map(|r| run_repeat(&ctx, r)).collect();

    let reports = out.join("reports");
    let mut ok_rows = Vec::new();
    let mut errors = String::new();
    let mut repeats = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok((rows, stats)) => {
                pcio::write_text(&reports.join(format!("repeat_{r}.csv")), &metrics::format_summary_csv(&rows))?;
                pcio::write_text(&reports.join(format!("repeat_{r}_inject.txt")), &stats)?;
                ok_rows.push(rows.clone());
                repeats.push(Ok(rows));
            }
            Err(e) => {
                log::error!("repeat {r} failed: {e}");
                let _ = writeln!(errors, "repeat {r}: {e}");
                repeats.push(Err(e.to_string()));
            }
        }
    }
    let errors_path = reports.join("errors.txt");
    if errors.is_empty() {
        if errors_path.exists() {
            fs::remove_file(&errors_path).map_err(|e| Error::Io(PcioError::Io { path: errors_path.clone(), source: e }))?;
        }
    } else {
        pcio::write_text(&errors_path, &errors)?;
    }
    if ok_rows.is_empty() {
        let first = repeats.iter().find_map(|r| r.as_ref().err()).cloned().unwrap_or_default();
        return Err(Error::Spec(format!("every repeat failed; first error: {first}")));
    }
    let summary = summarize_repeats(&ok_rows);
    pcio::write_text(&reports.join("summary.csv"), &metrics::format_summary_csv(&summary))?;
    pcio::write_text(&reports.join("summary.txt"), &metrics::format_summary_table(&summary))?;
    let log = stages.log.into_inner().unwrap();
    let mut computed = log.computed;
    let mut reused = log.reused;
    computed.sort();
    reused.sort();
    Ok(ExperimentReport {
        summary,
        repeats,
        computed,
        reused,
    })
}

/// Something that scores every detection of a frame.
pub enum FrameScorer {
    Output(Method),
    Model(FittedModel, LayerTag),
}

impl FrameScorer {
    pub fn score_all(&self, out: &crate::detector::DetectorOutput, frame_id: &str) -> Result<Vec<f64>> {
        match self {
            FrameScorer::Output(m) => out
                .detections
                .iter()
                .enumerate()
                .map(|(k, d)| {
                    let mc = out.mc_softmax_samples.as_ref().map(|s| s[k].as_slice());
                    scorers::score_output(*m, d, mc)
                        .ok_or_else(|| Error::Spec(format!("{m} needs MC softmax samples")))
                })
                .collect(),
            FrameScorer::Model(model, layer) => extract_test_samples(out, *layer, frame_id)?
                .iter()
                .map(|s| Ok(model.score(&s.vector_f64())?))
                .collect(),
        }
    }
}

/// Every detection of every frame with its OOD score, plus the frame's
/// ground truth, ready for the threshold sweep.
pub fn sweep_frames(ds: &Dataset, det: &dyn Detector, scorer: &FrameScorer) -> Result<Vec<SweepFrame>> {
    let classes = det.classes().to_vec();
    detect_all(ds, det, |i, out| {
        let fr = &ds.frames[i];
        let scores = scorer.score_all(out, fr.id())?;
        let predictions = out
            .detections
            .iter()
            .zip(scores)
            .map(|(d, s)| SweepPrediction {
                bbox: d.bbox,
                class_label: d.predicted_class,
                confidence: d.confidence,
                ood_score: s,
            })
            .collect();
        // OOD objects carry no detector class; ID labels of unknown classes are dropped
        let gt = fr
            .labels
            .iter()
            .filter_map(|l| {
                let class_label = if l.is_ood {
                    usize::MAX
                } else {
                    class_index(&classes, &l.class_name)?
                };
                Some(SweepGt {
                    bbox: l.bbox,
                    class_label,
                    is_ood: l.is_ood,
                })
            })
            .collect();
        Ok(SweepFrame { predictions, gt })
    })
}

/// Re-checks the OOD objects of a saved augmented dataset. Insertion
/// records next to the manifest, when present, add the confidence check.
pub fn audit_dataset(manifest: &Path, cfg: &InjectConfig) -> Result<AuditReport> {
    let ds = pcio::load_dataset(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new(""));
    let ins = inject::read_insertions(dir)?;
    Ok(inject::audit(&ds, &ins, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cells() {
        let g = GridConfig {
            methods: vec![Method::Flow, Method::MaxSoftmax, Method::Mahalanobis],
            layers: vec![LayerTag::Backbone, LayerTag::Conv2x],
        };
        let cells = g.cells();
        assert_eq!(cells.len(), 5);
        assert_eq!(g.output_methods(), vec![Method::MaxSoftmax]);
        assert_eq!(g.feature_layers(), vec![LayerTag::Conv2x, LayerTag::Backbone]);
    }

    #[test]
    fn digest_separates_parts() {
        assert_ne!(digest(&["ab", "c"]), digest(&["a", "bc"]));
        assert_eq!(digest(&["x"]).len(), 16);
    }

    #[test]
    fn summary_of_repeats() {
        let row = |auroc: f64| SummaryRow {
            method: "m".into(),
            layer: "l".into(),
            source: "all".into(),
            mean: metrics::MetricValues { auroc, ..Default::default() },
            sd: Default::default(),
            repeats: 1,
        };
        let s = summarize_repeats(&[vec![row(0.8)], vec![row(0.9)], vec![row(1.0)]]);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean.auroc - 0.9).abs() < 1e-15);
        assert!((s[0].sd.auroc - 0.1).abs() < 1e-12);
        assert_eq!(s[0].repeats, 3);
    }

    #[test]
    fn spec_parses_with_defaults() {
        let spec: ExperimentSpec = toml::from_str(
            r#"
            dataset = "id/dataset.txt"
            ood_db = "ood_db"
            seed = 7
            [grid]
            methods = ["max_softmax", "flow"]
            layers = ["backbone"]
            [flow.model]
            hidden = 32
            "#,
        )
        .unwrap();
        assert_eq!(spec.repeats, 3);
        assert_eq!(spec.flow.model.hidden, 32);
        assert_eq!(spec.flow.train.steps, 2320);
        assert_eq!(spec.grid.layers, vec![LayerTag::Backbone]);
        let back: ExperimentSpec = toml::from_str(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
