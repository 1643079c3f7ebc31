//! Ranking metrics with OOD as the positive class and larger scores meaning
//! more OOD, class-balanced resampling, and the OOD-threshold sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bev_iou, Box3D};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("single-class score set: need at least one ID and one OOD entry, got {n_id} ID and {n_ood} OOD")]
    SingleClassSet { n_id: usize, n_ood: usize },
    #[error("stratum class={class} ood={is_ood} is empty")]
    EmptyStratum { class: usize, is_ood: bool },
    #[error("no thresholds given")]
    EmptyThresholds,
    #[error("non-finite score at entry {0}")]
    NonFinite(usize),
    #[error("repeats must be at least 1")]
    NoRepeats,
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredEntry {
    pub score: f64,
    pub is_ood: bool,
    pub class_label: usize,
    pub frame_id: String,
}

impl ScoredEntry {
    pub fn new(score: f64, is_ood: bool) -> Self {
        Self {
            score,
            is_ood,
            class_label: 0,
            frame_id: String::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub entries: Vec<ScoredEntry>,
}

impl ScoredSet {
    pub fn new(entries: Vec<ScoredEntry>) -> Result<Self> {
        if let Some(i) = entries.iter().position(|e| !e.score.is_finite()) {
            return Err(MetricError::NonFinite(i));
        }
        Ok(Self { entries })
    }

    /// Builds a set from parallel score and label slices.
    pub fn from_pairs(scores: &[f64], is_ood: &[bool]) -> Result<Self> {
        Self::new(scores.iter().zip(is_ood).map(|(&s, &o)| ScoredEntry::new(s, o)).collect())
    }

    pub fn n_ood(&self) -> usize {
        self.entries.iter().filter(|e| e.is_ood).count()
    }

    pub fn n_id(&self) -> usize {
        self.entries.len() - self.n_ood()
    }

    fn check_two_class(&self) -> Result<(usize, usize)> {
        let (n_id, n_ood) = (self.n_id(), self.n_ood());
        if n_id == 0 || n_ood == 0 {
            return Err(MetricError::SingleClassSet { n_id, n_ood });
        }
        Ok((n_id, n_ood))
    }

    /// Entries sorted by score descending, as (score, is_ood).
    fn sorted_desc(&self) -> Vec<(f64, bool)> {
        let mut v: Vec<(f64, bool)> = self.entries.iter().map(|e| (e.score, e.is_ood)).collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        v
    }
}

/// `P(score_ood > score_id) + P(equal)/2`, from mid-ranks.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (n_id, n_ood) = s.check_two_class()?;
    let mut v: Vec<(f64, bool)> = s.entries.iter().map(|e| (e.score, e.is_ood)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * v[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positive {
    Id,
    Ood,
}

/// Step-wise area under the precision-recall curve. For ID positives the
/// scores are negated.
pub fn aupr(s: &ScoredSet, positive: Positive) -> Result<f64> {
    s.check_two_class()?;
    let mut v: Vec<(f64, bool)> = s
        .entries
        .iter()
        .map(|e| match positive {
            Positive::Ood => (e.score, e.is_ood),
            Positive::Id => (-e.score, !e.is_ood),
        })
        .collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = v.iter().filter(|e| e.1).count() as f64;
    let (mut tp, mut fp, mut area, mut last_recall) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let recall = tp / n_pos;
        area += (recall - last_recall) * tp / (tp + fp);
        last_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Operating point: the largest threshold `t` (predict OOD when
/// `score >= t`) whose TPR reaches 0.95. Returns `(threshold, tpr, fpr)`.
pub fn operating_point(s: &ScoredSet) -> Result<(f64, f64, f64)> {
    let (n_id, n_ood) = s.check_two_class()?;
    let v = s.sorted_desc();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let tpr = tp as f64 / n_ood as f64;
        if tpr >= TARGET_TPR {
            return Ok((v[i].0, tpr, fp as f64 / n_id as f64));
        }
        i = j;
    }
    unreachable!("the lowest threshold has TPR 1")
}

pub const TARGET_TPR: f64 = 0.95;

pub fn fpr_at_95_tpr(s: &ScoredSet) -> Result<f64> {
    Ok(operating_point(s)?.2)
}

/// `0.5 (1 - 0.95) + 0.5 FPR` at the 95% TPR operating point.
pub fn detection_error(s: &ScoredSet) -> Result<f64> {
    let fpr = fpr_at_95_tpr(s)?;
    Ok(0.5 * (1.0 - TARGET_TPR) + 0.5 * fpr)
}

pub const METRIC_NAMES: [&str; 5] = ["AUROC", "AUPR-In", "AUPR-Out", "D_e", "FPR@95TPR"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub detection_error: f64,
    pub fpr_at_95_tpr: f64,
}

impl MetricValues {
    pub fn to_array(self) -> [f64; 5] {
        [self.auroc, self.aupr_in, self.aupr_out, self.detection_error, self.fpr_at_95_tpr]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            auroc: a[0],
            aupr_in: a[1],
            aupr_out: a[2],
            detection_error: a[3],
            fpr_at_95_tpr: a[4],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub values: MetricValues,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn evaluate(s: &ScoredSet) -> Result<MetricReport> {
    Ok(MetricReport {
        values: MetricValues {
            auroc: auroc(s)?,
            aupr_in: aupr(s, Positive::Id)?,
            aupr_out: aupr(s, Positive::Ood)?,
            detection_error: detection_error(s)?,
            fpr_at_95_tpr: fpr_at_95_tpr(s)?,
        },
        n_id: s.n_id(),
        n_ood: s.n_ood(),
    })
}

/// Mean and sample standard deviation over resampling repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct BalancedReport {
    pub mean: MetricValues,
    pub sd: MetricValues,
    pub repeats: usize,
    /// Entries kept per stratum in every repeat.
    pub per_stratum: usize,
    pub n_id: usize,
    pub n_ood: usize,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(values: &[MetricValues]) -> (MetricValues, MetricValues) {
    let mut mean = [0.0; 5];
    let mut sd = [0.0; 5];
    for k in 0..5 {
        let col: Vec<f64> = values.iter().map(|v| v.to_array()[k]).collect();
        (mean[k], sd[k]) = mean_sd(&col);
    }
    (MetricValues::from_array(mean), MetricValues::from_array(sd))
}

/// Class-balanced evaluation. Strata are `(class, is_ood)` over the classes
/// that carry both ID and OOD entries; each repeat draws the smallest
/// stratum size from every stratum without replacement.
pub fn balanced_eval(s: &ScoredSet, repeats: usize, seed_: u64) -> Result<BalancedReport> {
    if repeats == 0 {
        return Err(MetricError::NoRepeats);
    }
    s.check_two_class()?;
    let mut strata: BTreeMap<(usize, bool), Vec<usize>> = BTreeMap::new();
    for (i, e) in s.entries.iter().enumerate() {
        strata.entry((e.class_label, e.is_ood)).or_default().push(i);
    }
    let classes: Vec<usize> = strata
        .keys()
        .map(|k| k.0)
        .filter(|c| strata.contains_key(&(*c, false)) && strata.contains_key(&(*c, true)))
        .collect();
    if classes.is_empty() {
        let (class, is_ood) = strata.keys().next().copied().unwrap();
        return Err(MetricError::EmptyStratum { class, is_ood: !is_ood });
    }
    strata.retain(|k, _| classes.contains(&k.0));
    let m = strata.values().map(Vec::len).min().unwrap();
    let runs: Vec<MetricValues> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(seed_, r as u64));
            let mut entries = Vec::with_capacity(m * strata.len());
            for members in strata.values() {
                if members.len() == m {
                    entries.extend(members.iter().map(|&i| s.entries[i].clone()));
                } else {
                    let mut pick = index::sample(&mut rng, members.len(), m).into_vec();
                    pick.sort_unstable();
                    entries.extend(pick.into_iter().map(|k| s.entries[members[k]].clone()));
                }
            }
            evaluate(&ScoredSet { entries }).map(|r| r.values)
        })
        .collect::<Result<_>>()?;
    let (mean, sd) = summarize(&runs);
    let n_ood = m * classes.len();
    Ok(BalancedReport {
        mean,
        sd,
        repeats,
        per_stratum: m,
        n_id: n_ood,
        n_ood,
    })
}

// ---------------------------------------------------------------------------
// Summary tables

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub layer: String,
    pub source: String,
    pub mean: MetricValues,
    pub sd: MetricValues,
    pub repeats: usize,
}

pub const SUMMARY_HEADER: &str = "method,layer,source,repeats,auroc,auroc_sd,aupr_in,aupr_in_sd,aupr_out,aupr_out_sd,detection_error,detection_error_sd,fpr95,fpr95_sd";

pub fn format_summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{},{}", r.method, r.layer, r.source, r.repeats);
        for (m, d) in r.mean.to_array().iter().zip(r.sd.to_array()) {
            let _ = write!(s, ",{m},{d}");
        }
        s.push('\n');
    }
    s
}

/// Parses [`format_summary_csv`] output. Values round-trip exactly.
pub fn parse_summary_csv(text: &str) -> std::result::Result<Vec<SummaryRow>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(format!("line {}: expected 14 fields, found {}", i + 1, f.len()));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| format!("line {}: bad number '{}'", i + 1, f[k]));
        let mut mean = [0.0; 5];
        let mut sd = [0.0; 5];
        for k in 0..5 {
            mean[k] = num(4 + 2 * k)?;
            sd[k] = num(5 + 2 * k)?;
        }
        rows.push(SummaryRow {
            method: f[0].to_string(),
            layer: f[1].to_string(),
            source: f[2].to_string(),
            repeats: f[3].parse().map_err(|_| format!("line {}: bad repeat count", i + 1))?,
            mean: MetricValues::from_array(mean),
            sd: MetricValues::from_array(sd),
        });
    }
    Ok(rows)
}

/// Aligned text table, one block per source, metrics as percentages.
pub fn format_summary_table(rows: &[SummaryRow]) -> String {
    let mut sources: Vec<&str> = rows.iter().map(|r| r.source.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    let mut out = String::new();
    for src in sources {
        let _ = writeln!(out, "source: {src}");
        let _ = write!(out, "{:<20} {:<10}", "method", "layer");
        for name in METRIC_NAMES {
            let _ = write!(out, " {name:>15}");
        }
        out.push('\n');
        for r in rows.iter().filter(|r| r.source == src) {
            let _ = write!(out, "{:<20} {:<10}", r.method, r.layer);
            for (m, d) in r.mean.to_array().iter().zip(r.sd.to_array()) {
                let cell = format!("{:.2} ± {:.1}", 100.0 * m, 100.0 * d);
                let _ = write!(out, " {cell:>15}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// OOD threshold sweep

/// A prediction with its OOD score.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPrediction {
    pub bbox: Box3D,
    pub class_label: usize,
    pub confidence: f64,
    pub ood_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGt {
    pub bbox: Box3D,
    pub class_label: usize,
    pub is_ood: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepFrame {
    pub predictions: Vec<SweepPrediction>,
    pub gt: Vec<SweepGt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Match IoU per class index; classes not listed use `default_iou`.
    pub class_iou: BTreeMap<usize, f64>,
    pub default_iou: f64,
    /// BEV IoU at which a prediction counts as lying on an OOD object.
    pub ood_iou: f64,
    pub recall_points: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            class_iou: BTreeMap::new(),
            default_iou: 0.5,
            ood_iou: 0.3,
            recall_points: 40,
        }
    }
}

impl SweepConfig {
    /// Default thresholds for named classes: 0.7 for `Car`, 0.5 otherwise.
    pub fn for_classes(classes: &[String]) -> Self {
        let class_iou = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (i, if c == "Car" { 0.7 } else { 0.5 }))
            .collect();
        Self {
            class_iou,
            ..Self::default()
        }
    }

    pub fn iou_for(&self, class: usize) -> f64 {
        self.class_iou.get(&class).copied().unwrap_or(self.default_iou)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub map: f64,
    pub n_fp: usize,
    pub n_removed: usize,
    pub ood_recall: f64,
}

/// Greedy matching in descending confidence. Returns one flag per kept
/// prediction (in the order given): matched to an ID object of its class.
fn match_frame(frame: &SweepFrame, kept: &[usize], cfg: &SweepConfig) -> Vec<bool> {
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by(|&a, &b| {
        frame.predictions[kept[b]]
            .confidence
            .total_cmp(&frame.predictions[kept[a]].confidence)
    });
    let mut taken = vec![false; frame.gt.len()];
    let mut tp = vec![false; kept.len()];
    for o in order {
        let p = &frame.predictions[kept[o]];
        let thr = cfg.iou_for(p.class_label);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in frame.gt.iter().enumerate() {
            if taken[g] || gt.is_ood || gt.class_label != p.class_label {
                continue;
            }
            let iou = bev_iou(&p.bbox, &gt.bbox);
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[o] = true;
        }
    }
    tp
}

/// Interpolated average precision sampled at `points` recall levels
/// `1/points, 2/points, ..., 1` (or `0, 0.1, ..., 1` for 11 points).
pub fn average_precision(mut dets: Vec<(f64, bool)>, n_gt: usize, points: usize) -> f64 {
    if n_gt == 0 || dets.is_empty() || points == 0 {
        return 0.0;
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for (i, d) in dets.iter().enumerate() {
        tp += usize::from(d.1);
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // running max of precision from the right
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let levels: Vec<f64> = if points == 11 {
        (0..11).map(|k| k as f64 / 10.0).collect()
    } else {
        (1..=points).map(|k| k as f64 / points as f64).collect()
    };
    let sum: f64 = levels
        .iter()
        .map(|&r| {
            curve
                .iter()
                .find(|c| c.0 >= r - 1e-12)
                .map_or(0.0, |c| c.1)
        })
        .sum();
    sum / levels.len() as f64
}

fn sweep_one(frames: &[SweepFrame], ood_flags: &[Vec<bool>], total_ood: usize, tau: f64, cfg: &SweepConfig) -> SweepRow {
    let mut per_class: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut n_fp, mut n_removed, mut ood_removed) = (0usize, 0usize, 0usize);
    for (f, frame) in frames.iter().enumerate() {
        for g in frame.gt.iter().filter(|g| !g.is_ood) {
            *n_gt.entry(g.class_label).or_default() += 1;
        }
        let mut kept = Vec::new();
        for (i, p) in frame.predictions.iter().enumerate() {
            if p.ood_score > tau {
                n_removed += 1;
                ood_removed += usize::from(ood_flags[f][i]);
            } else {
                kept.push(i);
            }
        }
        let tp = match_frame(frame, &kept, cfg);
        for (k, &i) in kept.iter().enumerate() {
            let p = &frame.predictions[i];
            n_fp += usize::from(!tp[k]);
            per_class.entry(p.class_label).or_default().push((p.confidence, tp[k]));
        }
    }
    let aps: Vec<f64> = n_gt
        .iter()
        .map(|(c, &n)| average_precision(per_class.remove(c).unwrap_or_default(), n, cfg.recall_points))
        .collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    SweepRow {
        threshold: tau,
        map,
        n_fp,
        n_removed,
        ood_recall: if total_ood == 0 {
            0.0
        } else {
            ood_removed as f64 / total_ood as f64
        },
    }
}

/// Whether each prediction lies on an OOD object (BEV IoU at least `ood_iou`).
pub fn ood_labels(frame: &SweepFrame, cfg: &SweepConfig) -> Vec<bool> {
    frame
        .predictions
        .iter()
        .map(|p| {
            frame
                .gt
                .iter()
                .any(|g| g.is_ood && bev_iou(&p.bbox, &g.bbox) >= cfg.ood_iou)
        })
        .collect()
}

/// Removes predictions with OOD score above each threshold and recounts mAP,
/// false positives, removals and the fraction of OOD-labelled predictions
/// removed. Rows come back in the order of `thresholds`.
pub fn ood_threshold_sweep(frames: &[SweepFrame], thresholds: &[f64], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() {
        return Err(MetricError::EmptyThresholds);
    }
    let flags: Vec<Vec<bool>> = frames.iter().map(|f| ood_labels(f, cfg)).collect();
    let total_ood = flags.iter().flatten().filter(|&&b| b).count();
    Ok(thresholds
        .par_iter()
        .map(|&t| sweep_one(frames, &flags, total_ood, t, cfg))
        .collect())
}

pub const SWEEP_HEADER: &str = "threshold,map,n_fp,n_removed,ood_recall";

pub fn format_sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{:.10},{},{},{:.10}", r.threshold, r.map, r.n_fp, r.n_removed, r.ood_recall);
    }
    s
}
