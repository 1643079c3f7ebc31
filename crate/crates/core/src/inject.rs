//! OOD scene generation: copy object snippets into frames under overlap, field
//! of view and detectability constraints.
//!
//! For every OOD class the generator walks the frames in manifest order. On
//! each frame it runs the detector once, then makes up to `gamma_max` trials:
//! pick a random object of the class, rotate it to a random azimuth at its
//! original range, and reject the trial if its box touches a ground-truth or
//! predicted box or its center leaves the field of view. Surviving candidates
//! are merged into the frame and the detector is run again. The insertion is
//! kept when some detection confirms the new box and every earlier prediction
//! survives. Accepted frames replace the originals, so later classes see
//! earlier insertions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Detector, DetectorError, Fov};
use crate::geometry::{bev_iou, fit_oriented_box, rotate_about_origin, Box3D, Detection, LabeledObject, PointCloud};
use crate::pcio::{self, Dataset, Frame, OodObjectRecord, OodSource, PcioError};
use crate::seed;

/// BEV IoU above this counts as overlap.
pub const OVERLAP_EPS: f64 = 1e-9;
/// Offset inside the log when matching log-scale intensity moments.
pub const LOG_EPS: f64 = 1e-3;
pub const INSERTIONS_FILE: &str = "insertions.txt";
pub const STATS_FILE: &str = "inject_stats.txt";

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("target cloud has no points")]
    EmptyTarget,
    #[error("object intensities have zero spread on the log scale")]
    DegenerateIntensity,
    #[error("no database objects for class '{0}'")]
    EmptyDatabaseClass(String),
    #[error("the OOD object database is empty")]
    EmptyDatabase,
    #[error("the dataset has no frames")]
    EmptyDataset,
    #[error("invalid inject config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Io(#[from] PcioError),
}

pub type Result<T> = std::result::Result<T, InjectError>;

/// How an inserted object's intensities are adapted to the host frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMode {
    Keep,
    Median,
    LogMoments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectConfig {
    /// Trials per frame.
    pub gamma_max: usize,
    /// Insertions per class.
    pub zeta_max: usize,
    /// Confidence a confirming detection must reach.
    pub tau: f64,
    pub rng_seed: u64,
    pub fov: Fov,
    /// BEV IoU between a detection and the proposed box that confirms it.
    pub confirm_iou: f64,
    /// BEV IoU, same class, that counts an earlier prediction as preserved.
    pub preserve_iou: f64,
    /// Margin added around the tight box of the inserted points, in meters.
    pub box_margin: f64,
    pub intensity_synthetic: IntensityMode,
    pub intensity_real: IntensityMode,
    /// Classes to insert; all database classes when empty.
    pub classes: Vec<String>,
}

impl Default for InjectConfig {
    fn default() -> Self {
        Self {
            gamma_max: 100,
            zeta_max: 300,
            tau: 0.3,
            rng_seed: 0,
            fov: Fov::default(),
            confirm_iou: 0.3,
            preserve_iou: 0.5,
            box_margin: 1e-3,
            intensity_synthetic: IntensityMode::Median,
            intensity_real: IntensityMode::Keep,
            classes: Vec::new(),
        }
    }
}

impl InjectConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(InjectError::InvalidConfig(m.into()));
        if self.gamma_max == 0 {
            return bad("gamma_max must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !self.fov.is_valid() {
            return bad("fov bounds must satisfy min < max on every axis");
        }
        if !(self.confirm_iou > 0.0 && self.confirm_iou <= 1.0 && self.preserve_iou > 0.0 && self.preserve_iou <= 1.0) {
            return bad("confirm_iou and preserve_iou must lie in (0, 1]");
        }
        if !(self.box_margin >= 0.0) {
            return bad("box_margin must be non-negative");
        }
        Ok(())
    }

    pub fn intensity_mode(&self, source: OodSource) -> IntensityMode {
        match source {
            OodSource::Synthetic => self.intensity_synthetic,
            OodSource::Real => self.intensity_real,
        }
    }
}

/// A database record together with its points, stored at the object's
/// original position in the sensor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct OodObject {
    pub record: OodObjectRecord,
    pub cloud: PointCloud,
}

/// Loads every record of the database in `dir` with its cloud.
pub fn load_ood_database(dir: &Path) -> Result<Vec<OodObject>> {
    let records = pcio::read_ood_db(dir)?;
    records
        .into_iter()
        .map(|record| {
            let path = resolve(dir, &record.cloud_path);
            let cloud = pcio::read_cloud(&path)?;
            Ok(OodObject { record, cloud })
        })
        .collect()
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

// ---------------------------------------------------------------------------
// Intensity

/// Summary of a host frame's intensities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetIntensity {
    pub median: f64,
    pub log_mean: f64,
    pub log_std: f64,
}

/// Median with the midpoint rule for even counts. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        return Some(hi);
    }
    let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(0.5 * (lo + hi))
}

/// Population mean and standard deviation.
fn moments(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl TargetIntensity {
    pub fn from_cloud(target: &PointCloud) -> Result<Self> {
        let i = target.intensities();
        let median = median(&i).ok_or(InjectError::EmptyTarget)?;
        let (log_mean, log_std) = moments(i.iter().map(|x| (x + LOG_EPS).ln()));
        Ok(Self {
            median,
            log_mean,
            log_std,
        })
    }
}

/// Sets every intensity of `obj` to the median intensity of `target`.
pub fn match_intensity_constant(obj: &PointCloud, target: &PointCloud) -> Result<PointCloud> {
    Ok(set_constant(obj, TargetIntensity::from_cloud(target)?.median))
}

fn set_constant(obj: &PointCloud, value: f64) -> PointCloud {
    let mut out = obj.clone();
    for p in &mut out.points {
        p.intensity = value;
    }
    out
}

/// Squashes intensities with `tanh`, then shifts and scales them on the log
/// scale so their log mean and log standard deviation match `target`'s.
pub fn match_intensity_log_moments(obj: &PointCloud, target: &PointCloud) -> Result<PointCloud> {
    log_moments_to(obj, &TargetIntensity::from_cloud(target)?)
}

fn log_moments_to(obj: &PointCloud, t: &TargetIntensity) -> Result<PointCloud> {
    if obj.is_empty() {
        return Err(InjectError::DegenerateIntensity);
    }
    let u: Vec<f64> = obj.points.iter().map(|p| (p.intensity.tanh() + LOG_EPS).ln()).collect();
    let (mean, std) = moments(u.iter().copied());
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(InjectError::DegenerateIntensity);
    }
    let gain = t.log_std / std;
    let mut out = obj.clone();
    for (p, ui) in out.points.iter_mut().zip(&u) {
        let v = (ui - mean) * gain + t.log_mean;
        p.intensity = (v.exp() - LOG_EPS).clamp(0.0, 1.0);
    }
    Ok(out)
}

fn adapt_intensity(obj: &PointCloud, mode: IntensityMode, target: Option<&TargetIntensity>) -> PointCloud {
    let Some(t) = target else {
        return obj.clone();
    };
    match mode {
        IntensityMode::Keep => obj.clone(),
        IntensityMode::Median => set_constant(obj, t.median),
        IntensityMode::LogMoments => log_moments_to(obj, t).unwrap_or_else(|_| {
            log::debug!("log-moment matching degenerate for {}; using the median", obj.frame_id);
            set_constant(obj, t.median)
        }),
    }
}

// ---------------------------------------------------------------------------
// Placement

/// A frame with an object merged in.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub cloud: PointCloud,
    pub bbox: Box3D,
    /// Indices of the inserted points in `cloud`.
    pub inserted: std::ops::Range<usize>,
}

/// Rotates `obj` about the sensor from `original_azimuth` to `azimuth` and
/// appends it to `frame`. The proposed box is the tight oriented box of the
/// rotated points, widened by `margin` and rounded to single precision so it
/// survives a label round trip unchanged.
pub fn place_object(obj: &OodObject, frame: &PointCloud, azimuth: f64, margin: f64) -> Placement {
    let delta = azimuth - obj.record.original_azimuth;
    let moved = if delta == 0.0 {
        obj.cloud.clone()
    } else {
        rotate_about_origin(&obj.cloud, delta)
    };
    let bbox = fit_oriented_box(moved.points.iter(), 0.05)
        .map(|b| b.padded(margin).quantized())
        .unwrap_or_else(|| Box3D::new([0.0; 3], [0.05; 3], 0.0));
    let start = frame.len();
    let cloud = frame.concat(&moved);
    Placement {
        inserted: start..cloud.len(),
        cloud,
        bbox,
    }
}

// ---------------------------------------------------------------------------
// Trials

#[derive(Clone, Debug, PartialEq)]
pub enum TrialResult {
    Accepted {
        frame: Frame,
        label: LabeledObject,
        detection: Detection,
    },
    OverlapOrFovFail,
    DetectFail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Accepted,
    OverlapOrFov,
    Detect,
}

impl TrialOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialOutcome::Accepted => "accepted",
            TrialOutcome::OverlapOrFov => "overlap_or_fov",
            TrialOutcome::Detect => "detect",
        }
    }
}

impl From<&TrialResult> for TrialOutcome {
    fn from(r: &TrialResult) -> Self {
        match r {
            TrialResult::Accepted { .. } => TrialOutcome::Accepted,
            TrialResult::OverlapOrFovFail => TrialOutcome::OverlapOrFov,
            TrialResult::DetectFail => TrialOutcome::Detect,
        }
    }
}

fn sample_azimuth(fov: &Fov, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = fov.azimuth_range();
    let u: f64 = rng.random();
    crate::geometry::normalize_angle(lo + (hi - lo) * u)
}

/// Checks a placed candidate and, if it passes the overlap and FOV tests,
/// runs the detector on the merged frame.
///
/// `predictions` are the detector's outputs on the unmodified frame.
pub fn evaluate_placement(
    frame: &Frame,
    predictions: &[Detection],
    obj: &OodObject,
    placement: Placement,
    model: &dyn Detector,
    cfg: &InjectConfig,
) -> Result<TrialResult> {
    let b = &placement.bbox;
    if !cfg.fov.contains(b.center[0], b.center[1], b.center[2]) {
        return Ok(TrialResult::OverlapOrFovFail);
    }
    let overlaps = frame.labels.iter().map(|l| &l.bbox).chain(predictions.iter().map(|p| &p.bbox));
    for other in overlaps {
        if bev_iou(b, other) > OVERLAP_EPS {
            return Ok(TrialResult::OverlapOrFovFail);
        }
    }
    let after = model.detect(&placement.cloud)?.detections;
    let confirm = after
        .iter()
        .find(|d| d.confidence >= cfg.tau && bev_iou(&d.bbox, b) >= cfg.confirm_iou);
    let Some(confirm) = confirm else {
        return Ok(TrialResult::DetectFail);
    };
    let preserved = predictions.iter().all(|p| {
        after
            .iter()
            .any(|q| q.predicted_class == p.predicted_class && bev_iou(&p.bbox, &q.bbox) >= cfg.preserve_iou)
    });
    if !preserved {
        return Ok(TrialResult::DetectFail);
    }
    let r = &obj.record;
    let mut labels = frame.labels.clone();
    let label = LabeledObject {
        bbox: placement.bbox,
        class_name: r.class_name.clone(),
        is_ood: true,
        category: r.category,
    };
    labels.push(label.clone());
    Ok(TrialResult::Accepted {
        frame: Frame {
            cloud: placement.cloud,
            labels,
        },
        label,
        detection: confirm.clone(),
    })
}

/// One trial of the generation loop with a random azimuth.
pub fn try_insert(
    frame: &Frame,
    predictions: &[Detection],
    obj: &OodObject,
    model: &dyn Detector,
    cfg: &InjectConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult> {
    let azimuth = sample_azimuth(&cfg.fov, rng);
    let target = TargetIntensity::from_cloud(&frame.cloud).ok();
    let adapted = OodObject {
        record: obj.record.clone(),
        cloud: adapt_intensity(&obj.cloud, cfg.intensity_mode(obj.record.source), target.as_ref()),
    };
    let placement = place_object(&adapted, &frame.cloud, azimuth, cfg.box_margin);
    evaluate_placement(frame, predictions, &adapted, placement, model, cfg)
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialRecord {
    pub class_name: String,
    pub frame_id: String,
    pub trial: usize,
    pub object_id: String,
    pub outcome: TrialOutcome,
}

/// An accepted insertion. `label_index` addresses the frame's label list.
#[derive(Clone, Debug, PartialEq)]
pub struct InsertionRecord {
    pub frame_id: String,
    pub label_index: usize,
    pub object_id: String,
    pub class_name: String,
    pub source: OodSource,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassStats {
    pub attempted_frames: usize,
    pub inserted_count: usize,
    pub injection_failure_trials: usize,
    pub detection_failure_trials: usize,
    pub accepted_trials: usize,
}

impl ClassStats {
    /// Failed overlap/FOV trials per attempted frame.
    pub fn injection_failures(&self) -> f64 {
        per_frame(self.injection_failure_trials, self.attempted_frames)
    }

    /// Failed detection trials per attempted frame.
    pub fn detection_failures(&self) -> f64 {
        per_frame(self.detection_failure_trials, self.attempted_frames)
    }
}

fn per_frame(n: usize, frames: usize) -> f64 {
    if frames == 0 {
        0.0
    } else {
        n as f64 / frames as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InjectStats {
    pub per_class: BTreeMap<String, ClassStats>,
}

impl InjectStats {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# class attempted_frames inserted injection_failures detection_failures\n");
        for (c, st) in &self.per_class {
            let _ = writeln!(
                s,
                "class={c} attempted_frames={} inserted={} injection_failures={} detection_failures={} \
                 injection_failure_trials={} detection_failure_trials={} accepted_trials={}",
                st.attempted_frames,
                st.inserted_count,
                pcio::fmt_sig9(st.injection_failures()),
                pcio::fmt_sig9(st.detection_failures()),
                st.injection_failure_trials,
                st.detection_failure_trials,
                st.accepted_trials,
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectOutput {
    pub dataset: Dataset,
    pub stats: InjectStats,
    pub trials: Vec<TrialRecord>,
    pub insertions: Vec<InsertionRecord>,
}

/// Classes to insert, in order.
fn target_classes(db: &[OodObject], cfg: &InjectConfig) -> Result<Vec<String>> {
    if db.is_empty() {
        return Err(InjectError::EmptyDatabase);
    }
    if cfg.classes.is_empty() {
        let mut v: Vec<String> = db.iter().map(|o| o.record.class_name.clone()).collect();
        v.sort();
        v.dedup();
        return Ok(v);
    }
    for c in &cfg.classes {
        if !db.iter().any(|o| &o.record.class_name == c) {
            return Err(InjectError::EmptyDatabaseClass(c.clone()));
        }
    }
    Ok(cfg.classes.clone())
}

/// Runs the generation loop over `dataset`.
pub fn generate_ood_dataset(
    dataset: &Dataset,
    db: &[OodObject],
    model: &dyn Detector,
    cfg: &InjectConfig,
) -> Result<InjectOutput> {
    cfg.validate()?;
    if dataset.frames.is_empty() {
        return Err(InjectError::EmptyDataset);
    }
    let classes = target_classes(db, cfg)?;
    let mut ds = dataset.clone();
    let mut stats = InjectStats::default();
    let mut trials = Vec::new();
    let mut insertions = Vec::new();

    for class in &classes {
        let pool: Vec<&OodObject> = db.iter().filter(|o| &o.record.class_name == class).collect();
        let mut rng = seed::rng(seed::derive_path(cfg.rng_seed, &[seed::stage::INJECT, seed::name_tag(class)]));
        let st = stats.per_class.entry(class.clone()).or_default();
        for fi in 0..ds.frames.len() {
            if st.inserted_count >= cfg.zeta_max {
                break;
            }
            st.attempted_frames += 1;
            let frame = &ds.frames[fi];
            let predictions = model.detect(&frame.cloud)?.detections;
            let target = TargetIntensity::from_cloud(&frame.cloud).ok();
            let mut accepted = None;
            for trial in 0..cfg.gamma_max {
                let obj = pool[rng.random_range(0..pool.len())];
                let azimuth = sample_azimuth(&cfg.fov, &mut rng);
                let adapted = OodObject {
                    record: obj.record.clone(),
                    cloud: adapt_intensity(&obj.cloud, cfg.intensity_mode(obj.record.source), target.as_ref()),
                };
                let placement = place_object(&adapted, &frame.cloud, azimuth, cfg.box_margin);
                let result = evaluate_placement(frame, &predictions, &adapted, placement, model, cfg)?;
                let outcome = TrialOutcome::from(&result);
                trials.push(TrialRecord {
                    class_name: class.clone(),
                    frame_id: frame.id().to_string(),
                    trial,
                    object_id: obj.record.object_id.clone(),
                    outcome,
                });
                match result {
                    TrialResult::OverlapOrFovFail => st.injection_failure_trials += 1,
                    TrialResult::DetectFail => st.detection_failure_trials += 1,
                    TrialResult::Accepted { frame, detection, .. } => {
                        st.accepted_trials += 1;
                        accepted = Some((frame, detection, obj));
                        break;
                    }
                }
            }
            if let Some((new_frame, det, obj)) = accepted {
                insertions.push(InsertionRecord {
                    frame_id: new_frame.id().to_string(),
                    label_index: new_frame.labels.len() - 1,
                    object_id: obj.record.object_id.clone(),
                    class_name: class.clone(),
                    source: obj.record.source,
                    confidence: det.confidence,
                });
                ds.frames[fi] = new_frame;
                st.inserted_count += 1;
            }
        }
        log::info!(
            "{class}: inserted {} over {} frames",
            st.inserted_count,
            st.attempted_frames
        );
    }
    Ok(InjectOutput {
        dataset: ds,
        stats,
        trials,
        insertions,
    })
}

// ---------------------------------------------------------------------------
// Persistence of insertion metadata

pub fn format_insertions(records: &[InsertionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "insertion frame={} label={} object={} class={} source={} confidence={}",
            r.frame_id,
            r.label_index,
            r.object_id,
            r.class_name,
            r.source.as_str(),
            pcio::fmt_sig9(r.confidence)
        );
    }
    s
}

pub fn parse_insertions(text: &str, path: &Path) -> std::result::Result<Vec<InsertionRecord>, PcioError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| PcioError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut it = line.split_whitespace();
        if it.next() != Some("insertion") {
            return Err(err("expected an 'insertion' record".into()));
        }
        let mut kv = BTreeMap::new();
        for tok in it {
            let (k, v) = tok.split_once('=').ok_or_else(|| err(format!("bad field '{tok}'")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| err(format!("missing '{k}'")));
        out.push(InsertionRecord {
            frame_id: get("frame")?.to_string(),
            label_index: get("label")?.parse().map_err(|_| err("bad label index".into()))?,
            object_id: get("object")?.to_string(),
            class_name: get("class")?.to_string(),
            source: OodSource::parse(get("source")?).ok_or_else(|| err("bad source".into()))?,
            confidence: get("confidence")?.parse().map_err(|_| err("bad confidence".into()))?,
        });
    }
    Ok(out)
}

/// Reads `insertions.txt` beside a manifest, or an empty list if absent.
pub fn read_insertions(dataset_dir: &Path) -> std::result::Result<Vec<InsertionRecord>, PcioError> {
    let p = dataset_dir.join(INSERTIONS_FILE);
    if !p.exists() {
        return Ok(Vec::new());
    }
    parse_insertions(&pcio::read_text(&p)?, &p)
}

/// Writes the augmented dataset, the insertion records and the stats into
/// `dir`. Returns the manifest path.
pub fn save_output(out: &InjectOutput, dir: &Path) -> std::result::Result<PathBuf, PcioError> {
    let manifest = pcio::save_dataset(&out.dataset, dir)?;
    pcio::write_text(&dir.join(INSERTIONS_FILE), &format_insertions(&out.insertions))?;
    pcio::write_text(&dir.join(STATS_FILE), &out.stats.to_text())?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Audit

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationKind {
    /// Overlaps the label at this index.
    Overlap(usize),
    OutsideFov,
    LowConfidence(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub frame_id: String,
    pub object_index: usize,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    /// Number of OOD objects inspected.
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("checked={} violations={}\n", self.checked, self.violations.len());
        for v in &self.violations {
            let kind = match &v.kind {
                ViolationKind::Overlap(j) => format!("overlap with={j}"),
                ViolationKind::OutsideFov => "outside_fov".into(),
                ViolationKind::LowConfidence(c) => format!("low_confidence value={}", pcio::fmt_sig9(*c)),
            };
            let _ = writeln!(s, "violation frame={} object={} {kind}", v.frame_id, v.object_index);
        }
        s
    }
}

/// Re-checks every OOD object: no BEV overlap with any other label of its
/// frame, center inside the FOV, and, where insertion records are given,
/// confirming confidence at least `tau`.
pub fn audit(ds: &Dataset, insertions: &[InsertionRecord], cfg: &InjectConfig) -> AuditReport {
    let mut report = AuditReport::default();
    for f in &ds.frames {
        for (i, obj) in f.labels.iter().enumerate() {
            if !obj.is_ood {
                continue;
            }
            report.checked += 1;
            let mut flag = |kind| {
                report.violations.push(Violation {
                    frame_id: f.id().to_string(),
                    object_index: i,
                    kind,
                })
            };
            let c = obj.bbox.center;
            if !cfg.fov.contains(c[0], c[1], c[2]) {
                flag(ViolationKind::OutsideFov);
            }
            for (j, other) in f.labels.iter().enumerate() {
                if j != i && bev_iou(&obj.bbox, &other.bbox) > OVERLAP_EPS {
                    flag(ViolationKind::Overlap(j));
                }
            }
            if let Some(r) = insertions.iter().find(|r| r.frame_id == f.id() && r.label_index == i) {
                if r.confidence < cfg.tau {
                    flag(ViolationKind::LowConfidence(r.confidence));
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, StubDetector};
    use crate::geometry::{points_in_box, OodCategory, Point};

    fn cloud(i: &[f64]) -> PointCloud {
        PointCloud::new("t", i.iter().map(|&v| Point::new(0.0, 0.0, 0.0, v)).collect())
    }

    fn block(center: [f64; 3], size: [f64; 3], n: usize, seed: u64) -> Vec<Point> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|_| {
                Point::new(
                    center[0] + size[0] * (rng.random::<f64>() - 0.5),
                    center[1] + size[1] * (rng.random::<f64>() - 0.5),
                    center[2] + size[2] * (rng.random::<f64>() - 0.5),
                    rng.random::<f64>(),
                )
            })
            .collect()
    }

    fn object(center: [f64; 3], size: [f64; 3], n: usize) -> OodObject {
        let pts = block(center, size, n, 9);
        OodObject {
            record: OodObjectRecord {
                object_id: "o1".into(),
                class_name: "crate".into(),
                source: OodSource::Synthetic,
                category: OodCategory::MisdetectedOodBackground,
                original_range: center[0].hypot(center[1]),
                original_azimuth: center[1].atan2(center[0]),
                cloud_path: "o1.bin".into(),
            },
            cloud: PointCloud::new("o1", pts),
        }
    }

    #[test]
    fn constant_median() {
        let out = match_intensity_constant(&cloud(&[0.9, 0.1]), &cloud(&[0.2, 0.4, 0.6])).unwrap();
        assert!(out.points.iter().all(|p| p.intensity == 0.4));
        let out = match_intensity_constant(&cloud(&[0.9]), &cloud(&[0.5; 4])).unwrap();
        assert_eq!(out.points[0].intensity, 0.5);
        assert!(matches!(
            match_intensity_constant(&cloud(&[0.9]), &cloud(&[])),
            Err(InjectError::EmptyTarget)
        ));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn log_moments_reject_constant_object() {
        assert!(matches!(
            match_intensity_log_moments(&cloud(&[0.3; 5]), &cloud(&[0.1, 0.5])),
            Err(InjectError::DegenerateIntensity)
        ));
    }

    #[test]
    fn log_moments_fixed_point() {
        let obj = cloud(&[0.1, 0.2, 0.3, 0.5]);
        // A target whose log moments equal those of tanh(obj).
        let target = PointCloud::new(
            "t",
            obj.points.iter().map(|p| Point::new(0.0, 0.0, 0.0, p.intensity.tanh())).collect(),
        );
        let out = match_intensity_log_moments(&obj, &target).unwrap();
        for (o, t) in out.points.iter().zip(&target.points) {
            assert!((o.intensity - t.intensity).abs() < 1e-12);
        }
    }

    #[test]
    fn placement_preserves_range_and_recovers_points() {
        let obj = object([12.0, 3.0, -0.5], [1.0, 0.8, 1.2], 60);
        let frame = PointCloud::new("f", block([30.0, -10.0, -1.0], [2.0, 2.0, 1.0], 50, 2));
        let same = place_object(&obj, &frame, obj.record.original_azimuth, 1e-3);
        assert_eq!(same.cloud, frame.concat(&obj.cloud));
        for az in [-1.0, 0.3, 1.2] {
            let p = place_object(&obj, &frame, az, 1e-3);
            for (a, b) in obj.cloud.points.iter().zip(&p.cloud.points[p.inserted.clone()]) {
                assert!((a.range() - b.range()).abs() < 1e-9);
            }
            assert_eq!(points_in_box(&p.cloud, &p.bbox), p.inserted.clone().collect::<Vec<_>>());
        }
    }

    #[test]
    fn trial_outcomes() {
        let stub = StubDetector::new(DetectorConfig::default()).unwrap();
        let cfg = InjectConfig::default();
        let obj = object([15.0, 0.0, -1.0], [3.8, 1.6, 1.5], 200);
        let empty = Frame {
            cloud: PointCloud::new("f", Vec::new()),
            labels: Vec::new(),
        };
        let p = place_object(&obj, &empty.cloud, obj.record.original_azimuth, cfg.box_margin);
        let r = evaluate_placement(&empty, &[], &obj, p.clone(), &stub, &cfg).unwrap();
        match r {
            TrialResult::Accepted { label, detection, .. } => {
                assert!(label.is_ood);
                assert!(detection.confidence >= cfg.tau);
            }
            other => panic!("expected acceptance, got {other:?}"),
        }
        let blocked = Frame {
            cloud: empty.cloud.clone(),
            labels: vec![LabeledObject::in_distribution(
                Box3D::new([15.5, 0.2, -1.0], [3.9, 1.6, 1.56], 0.1),
                "Car",
            )],
        };
        assert_eq!(
            evaluate_placement(&blocked, &[], &obj, p, &stub, &cfg).unwrap(),
            TrialResult::OverlapOrFovFail
        );
        let behind = object([-15.0, 0.0, -1.0], [3.8, 1.6, 1.5], 200);
        let p = place_object(&behind, &empty.cloud, behind.record.original_azimuth, cfg.box_margin);
        assert_eq!(
            evaluate_placement(&empty, &[], &behind, p, &stub, &cfg).unwrap(),
            TrialResult::OverlapOrFovFail
        );
    }

    #[test]
    fn zero_budget_leaves_dataset_unchanged() {
        let stub = StubDetector::new(DetectorConfig::default()).unwrap();
        let ds = Dataset {
            classes: vec!["Car".into()],
            frames: vec![Frame {
                cloud: PointCloud::new("a", block([20.0, 0.0, -1.0], [3.9, 1.6, 1.5], 100, 3)),
                labels: Vec::new(),
            }],
        };
        let db = vec![object([15.0, 5.0, -1.0], [1.0, 1.0, 1.0], 80)];
        let cfg = InjectConfig {
            zeta_max: 0,
            ..Default::default()
        };
        let out = generate_ood_dataset(&ds, &db, &stub, &cfg).unwrap();
        assert_eq!(out.dataset, ds);
        assert!(out.trials.is_empty());
    }

    #[test]
    fn always_overlapping_object_counts_injection_failures() {
        let stub = StubDetector::new(DetectorConfig::default()).unwrap();
        // A GT box covering the whole FOV blocks every placement.
        let wall = LabeledObject::in_distribution(Box3D::new([20.0, 0.0, -1.0], [80.0, 80.0, 10.0], 0.0), "Car");
        let frames = (0..3)
            .map(|i| Frame {
                cloud: PointCloud::new(format!("f{i}"), Vec::new()),
                labels: vec![wall.clone()],
            })
            .collect();
        let ds = Dataset {
            classes: vec!["Car".into()],
            frames,
        };
        let db = vec![object([15.0, 5.0, -1.0], [1.0, 1.0, 1.0], 80)];
        let cfg = InjectConfig {
            gamma_max: 1,
            ..Default::default()
        };
        let out = generate_ood_dataset(&ds, &db, &stub, &cfg).unwrap();
        let st = &out.stats.per_class["crate"];
        assert_eq!(st.inserted_count, 0);
        assert_eq!(st.attempted_frames, 3);
        assert_eq!(st.injection_failures(), 1.0);
        assert_eq!(st.detection_failures(), 0.0);
    }

    #[test]
    fn unknown_class_is_rejected() {
        let stub = StubDetector::new(DetectorConfig::default()).unwrap();
        let ds = Dataset {
            classes: vec!["Car".into()],
            frames: vec![Frame {
                cloud: PointCloud::new("a", Vec::new()),
                labels: Vec::new(),
            }],
        };
        let db = vec![object([15.0, 5.0, -1.0], [1.0, 1.0, 1.0], 80)];
        let cfg = InjectConfig {
            classes: vec!["piano".into()],
            ..Default::default()
        };
        assert!(matches!(
            generate_ood_dataset(&ds, &db, &stub, &cfg),
            Err(InjectError::EmptyDatabaseClass(_))
        ));
    }

    #[test]
    fn insertion_records_round_trip() {
        let r = vec![InsertionRecord {
            frame_id: "000001".into(),
            label_index: 3,
            object_id: "bench_2".into(),
            class_name: "bench".into(),
            source: OodSource::Real,
            confidence: 0.75,
        }];
        assert_eq!(parse_insertions(&format_insertions(&r), Path::new("x")).unwrap(), r);
    }
}
