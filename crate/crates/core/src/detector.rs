//! The detection-model interface and a deterministic geometric stub.
//!
//! Any model the toolkit drives implements [`Detector`]. A neural detector
//! living outside this process can be wrapped two ways: implement the trait
//! over an IPC call, or skip live calls entirely and hand the toolkit feature
//! dumps (see [`crate::pcio::FeatureDump`]) that the `fit` and `score`
//! commands consume directly.
//!
//! [`StubDetector`] expects ground-removed clouds. It bins in-FOV points into
//! BEV cells, merges 8-connected occupied cells into clusters and emits one
//! detection per cluster of at least `min_points` returns:
//!
//! * the box is the tight oriented box of the cluster's points;
//! * the predicted class is the size template nearest to the box extents;
//! * the predicted class gets probability `logistic(n / 100)`; the remaining
//!   mass goes to the other classes and background through a softmax of
//!   negative size mismatches;
//! * feature maps are fixed pseudo-random projections of pooled occupancy
//!   statistics (point count, height profile, intensity, occupancy) over
//!   2×2, 4×4 and 8×8 cell blocks and a sliding backbone window;
//! * MC samples are Dirichlet draws with concentration `50 * class_probs`.
//!
//! Because the predicted class always carries probability above one half,
//! adding returns to a cluster only raises its confidence.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featx::{AnchorGrid, AnchorTemplate, FeatureMap, LayerTag};
use crate::geometry::{fit_oriented_box, normalize_angle, AnchorIndex, Detection, Point, PointCloud};
use crate::seed;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("detector failure: {0}")]
    DetectorFailure(String),
}

/// Everything a model returns for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    /// Sorted by confidence, highest first.
    pub detections: Vec<Detection>,
    pub feature_maps: BTreeMap<LayerTag, FeatureMap>,
    /// Per detection, `T` sampled class distributions.
    pub mc_softmax_samples: Option<Vec<Vec<Vec<f64>>>>,
}

impl DetectorOutput {
    pub fn empty() -> Self {
        Self {
            detections: Vec::new(),
            feature_maps: BTreeMap::new(),
            mc_softmax_samples: None,
        }
    }

    /// Backbone map dimensions, or `(0, 0)` if none is present.
    pub fn backbone_dims(&self) -> (usize, usize) {
        self.feature_maps
            .get(&LayerTag::Backbone)
            .map(|m| (m.height, m.width))
            .unwrap_or((0, 0))
    }
}

/// A detection model. `detect` must be deterministic for a fixed model and
/// cloud, and safe to call concurrently on distinct clouds.
pub trait Detector: Sync {
    fn detect(&self, pc: &PointCloud) -> Result<DetectorOutput, DetectorError>;

    /// Foreground class names, in `class_probs` order.
    fn classes(&self) -> &[String];

    fn anchor_grid(&self) -> &AnchorGrid;
}

/// Sensor field of view as an axis-aligned box, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fov {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for Fov {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 40.0,
            y_min: -20.0,
            y_max: 20.0,
            z_min: -3.0,
            z_max: 1.0,
        }
    }
}

impl Fov {
    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && self.z_min < self.z_max
    }

    /// Half-open in x and y, closed in z.
    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max && z >= self.z_min && z <= self.z_max
    }

    pub fn contains_point(&self, p: &Point) -> bool {
        self.contains(p.x, p.y, p.z)
    }

    /// The azimuth interval covered by the FOV rectangle, as seen from the
    /// origin. Falls back to the full circle when the rectangle contains the
    /// origin or straddles the `±pi` cut.
    pub fn azimuth_range(&self) -> (f64, f64) {
        use std::f64::consts::PI;
        let contains_origin = self.x_min < 0.0 && self.x_max > 0.0 && self.y_min < 0.0 && self.y_max > 0.0;
        let straddles_cut = self.x_min < 0.0 && self.y_min < 0.0 && self.y_max >= 0.0;
        if contains_origin || straddles_cut {
            return (-PI, PI);
        }
        let corners = [
            (self.x_min, self.y_min),
            (self.x_min, self.y_max),
            (self.x_max, self.y_min),
            (self.x_max, self.y_max),
        ];
        let az: Vec<f64> = corners.iter().map(|&(x, y)| y.atan2(x)).collect();
        let lo = az.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = az.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// A class and its nominal `[length, width, height]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub name: String,
    pub size: [f64; 3],
    #[serde(default)]
    pub z_center: f64,
    /// Positive-anchor IoU threshold; defaults by class name.
    #[serde(default)]
    pub pos_iou: Option<f64>,
}

fn default_classes() -> Vec<ClassTemplate> {
    vec![
        ClassTemplate {
            name: "Car".into(),
            size: [3.9, 1.6, 1.56],
            z_center: -1.0,
            pos_iou: None,
        },
        ClassTemplate {
            name: "Pedestrian".into(),
            size: [0.8, 0.6, 1.73],
            z_center: -0.6,
            pos_iou: None,
        },
        ClassTemplate {
            name: "Cyclist".into(),
            size: [1.76, 0.6, 1.73],
            z_center: -0.6,
            pos_iou: None,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Detections below this confidence are dropped.
    pub score_threshold: f64,
    pub fov: Fov,
    /// Number of MC softmax samples per detection.
    pub mc_samples: usize,
    pub rng_seed: u64,
    /// BEV cell edge in meters; also the backbone grid resolution.
    pub cell_size: f64,
    pub min_points: usize,
    /// Softmax temperature over size mismatches, in meters.
    pub temperature: f64,
    /// Size mismatch assigned to the background entry, in meters.
    pub background_distance: f64,
    pub feature_channels: usize,
    /// Half-width, in cells, of the backbone pooling window.
    pub backbone_radius: usize,
    pub classes: Vec<ClassTemplate>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            fov: Fov::default(),
            mc_samples: 10,
            rng_seed: 0,
            cell_size: 0.5,
            min_points: 30,
            temperature: 0.5,
            background_distance: 1.0,
            feature_channels: 16,
            backbone_radius: 3,
            classes: default_classes(),
        }
    }
}

const MAX_STRIDE: usize = 8;

impl DetectorConfig {
    pub fn grid_dims(&self) -> (usize, usize) {
        let rows = ((self.fov.y_max - self.fov.y_min) / self.cell_size).round() as usize;
        let cols = ((self.fov.x_max - self.fov.x_min) / self.cell_size).round() as usize;
        (rows, cols)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_string()));
        if !self.fov.is_valid() {
            return bad("fov bounds must satisfy min < max on every axis");
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return bad("score_threshold must lie in [0, 1]");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if self.cell_size <= 0.0 || self.temperature <= 0.0 || self.min_points == 0 {
            return bad("cell_size, temperature and min_points must be positive");
        }
        if self.classes.is_empty() || self.feature_channels == 0 {
            return bad("need at least one class and one feature channel");
        }
        let (rows, cols) = self.grid_dims();
        let exact_r = (rows as f64 * self.cell_size - (self.fov.y_max - self.fov.y_min)).abs() < 1e-9;
        let exact_c = (cols as f64 * self.cell_size - (self.fov.x_max - self.fov.x_min)).abs() < 1e-9;
        if !exact_r || !exact_c || rows == 0 || cols == 0 {
            return bad("fov extent must be a whole number of cells");
        }
        if rows % MAX_STRIDE != 0 || cols % MAX_STRIDE != 0 {
            return bad("grid dimensions must be multiples of 8");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Anchors at yaw 0 and pi/2 for every class, in that order.
    pub fn anchor_grid(&self) -> AnchorGrid {
        let (rows, cols) = self.grid_dims();
        let mut templates = Vec::new();
        for (ci, c) in self.classes.iter().enumerate() {
            for yaw in [0.0, std::f64::consts::FRAC_PI_2] {
                templates.push(AnchorTemplate {
                    class_index: ci,
                    size: c.size,
                    yaw,
                    z_center: c.z_center,
                });
            }
        }
        AnchorGrid {
            rows,
            cols,
            cell_size: self.cell_size,
            x_min: self.fov.x_min,
            y_min: self.fov.y_min,
            templates,
            pos_iou: self
                .classes
                .iter()
                .map(|c| c.pos_iou.unwrap_or_else(|| AnchorGrid::default_pos_iou(&c.name)))
                .collect(),
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The geometric reference detector.
#[derive(Clone, Debug)]
pub struct StubDetector {
    cfg: DetectorConfig,
    class_names: Vec<String>,
    grid: AnchorGrid,
}

#[derive(Clone, Copy, Default)]
struct CellStats {
    count: f64,
    sum_z: f64,
    sum_z2: f64,
    sum_i: f64,
    max_z: f64,
    min_z: f64,
    occupied: f64,
    cells: f64,
}

impl CellStats {
    fn merge(&mut self, o: &CellStats) {
        if o.count > 0.0 {
            if self.count > 0.0 {
                self.max_z = self.max_z.max(o.max_z);
                self.min_z = self.min_z.min(o.min_z);
            } else {
                self.max_z = o.max_z;
                self.min_z = o.min_z;
            }
        }
        self.count += o.count;
        self.sum_z += o.sum_z;
        self.sum_z2 += o.sum_z2;
        self.sum_i += o.sum_i;
        self.occupied += o.occupied;
        self.cells += o.cells;
    }

    fn descriptor(&self) -> [f64; 8] {
        if self.count == 0.0 {
            return [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        }
        let mean_z = self.sum_z / self.count;
        let var_z = (self.sum_z2 / self.count - mean_z * mean_z).max(0.0);
        [
            (1.0 + self.count).ln() / 4.0,
            mean_z / 2.0,
            self.max_z / 2.0,
            self.min_z / 2.0,
            var_z.sqrt(),
            self.sum_i / self.count,
            self.occupied / self.cells.max(1.0),
            1.0,
        ]
    }
}

const DESCRIPTOR_LEN: usize = 8;
const DIRICHLET_CONCENTRATION: f64 = 50.0;

fn projection_weight(layer: LayerTag, channel: usize, input: usize) -> f64 {
    let h = seed::derive_path(0x5354_5542, &[u64::from(layer.code()), channel as u64, input as u64]);
    let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
    3.0 * unit - 1.5
}

impl StubDetector {
    pub fn new(cfg: DetectorConfig) -> Result<Self, DetectorError> {
        cfg.validate()?;
        Ok(Self {
            class_names: cfg.class_names(),
            grid: cfg.anchor_grid(),
            cfg,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Class distribution for a box of extents `size` supported by `n` points.
    /// Returns `(class_probs, logits)`.
    pub fn class_distribution(&self, size: [f64; 3], n: usize) -> (Vec<f64>, Vec<f64>) {
        let k = self.cfg.classes.len();
        let dist: Vec<f64> = self
            .cfg
            .classes
            .iter()
            .map(|c| {
                let d2: f64 = (0..3).map(|i| (size[i] - c.size[i]).powi(2)).sum();
                d2.sqrt()
            })
            .collect();
        let mut best = 0;
        for (i, d) in dist.iter().enumerate() {
            if *d < dist[best] {
                best = i;
            }
        }
        let top = logistic(n as f64 / 100.0);
        let t = self.cfg.temperature;
        // Remaining mass over the other FG classes and background.
        let rest: Vec<(usize, f64)> = (0..=k)
            .filter(|&i| i != best)
            .map(|i| {
                let d = if i == k { self.cfg.background_distance } else { dist[i] };
                (i, -d / t)
            })
            .collect();
        let m = rest.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = rest.iter().map(|r| (r.1 - m).exp()).sum();
        let mut probs = vec![0.0; k + 1];
        probs[best] = top;
        for (i, l) in &rest {
            probs[*i] = (1.0 - top) * (l - m).exp() / z;
        }
        let logits = probs.iter().map(|p| p.ln()).collect();
        (probs, logits)
    }

    fn cell_index(&self, p: &Point) -> Option<(usize, usize)> {
        if !self.cfg.fov.contains_point(p) {
            return None;
        }
        self.grid.cell_of(p.x, p.y)
    }

    fn feature_maps(&self, stats: &[CellStats]) -> BTreeMap<LayerTag, FeatureMap> {
        let (rows, cols) = (self.grid.rows, self.grid.cols);
        let ch = self.cfg.feature_channels;
        let mut maps = BTreeMap::new();
        let weights: BTreeMap<LayerTag, Vec<f64>> = LayerTag::MAPS
            .iter()
            .map(|&l| {
                let w = (0..ch)
                    .flat_map(|k| (0..DESCRIPTOR_LEN).map(move |j| projection_weight(l, k, j)))
                    .collect();
                (l, w)
            })
            .collect();
        let project = |layer: LayerTag, s: &CellStats, out: &mut [f32]| {
            let d = s.descriptor();
            let w = &weights[&layer];
            for (k, o) in out.iter_mut().enumerate() {
                let acc: f64 = (0..DESCRIPTOR_LEN).map(|j| w[k * DESCRIPTOR_LEN + j] * d[j]).sum();
                *o = acc.tanh() as f32;
            }
        };
        for (layer, stride) in [(LayerTag::Conv2x, 2), (LayerTag::Conv4x, 4), (LayerTag::Conv8x, 8)] {
            let (h, w) = (rows / stride, cols / stride);
            let mut fm = FeatureMap::zeros(layer, h, w, ch, stride);
            for r in 0..h {
                for c in 0..w {
                    let mut agg = CellStats::default();
                    for rr in r * stride..(r + 1) * stride {
                        for cc in c * stride..(c + 1) * stride {
                            agg.merge(&stats[rr * cols + cc]);
                        }
                    }
                    project(layer, &agg, fm.cell_mut(r, c));
                }
            }
            maps.insert(layer, fm);
        }
        let rad = self.cfg.backbone_radius;
        let mut fm = FeatureMap::zeros(LayerTag::Backbone, rows, cols, ch, 1);
        for r in 0..rows {
            for c in 0..cols {
                let mut agg = CellStats::default();
                for rr in r.saturating_sub(rad)..(r + rad + 1).min(rows) {
                    for cc in c.saturating_sub(rad)..(c + rad + 1).min(cols) {
                        agg.merge(&stats[rr * cols + cc]);
                    }
                }
                project(LayerTag::Backbone, &agg, fm.cell_mut(r, c));
            }
        }
        maps.insert(LayerTag::Backbone, fm);
        maps
    }

    fn mc_samples(&self, probs: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed);
        (0..self.cfg.mc_samples)
            .map(|_| {
                let draws: Vec<f64> = probs
                    .iter()
                    .map(|&p| {
                        let alpha = (DIRICHLET_CONCENTRATION * p).max(1e-3);
                        Gamma::new(alpha, 1.0).map(|g| g.sample(&mut rng)).unwrap_or(0.0)
                    })
                    .collect();
                let total: f64 = draws.iter().sum();
                if total > 0.0 && total.is_finite() {
                    draws.iter().map(|d| d / total).collect()
                } else {
                    probs.to_vec()
                }
            })
            .collect()
    }
}

/// Runs the stub on `pc` with `cfg`.
pub fn stub_detect(pc: &PointCloud, cfg: &DetectorConfig) -> Result<DetectorOutput, DetectorError> {
    StubDetector::new(cfg.clone())?.detect(pc)
}

impl Detector for StubDetector {
    fn detect(&self, pc: &PointCloud) -> Result<DetectorOutput, DetectorError> {
        let (rows, cols) = (self.grid.rows, self.grid.cols);
        let mut stats = vec![
            CellStats {
                cells: 1.0,
                ..Default::default()
            };
            rows * cols
        ];
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); rows * cols];
        for (i, p) in pc.points.iter().enumerate() {
            let Some((r, c)) = self.cell_index(p) else {
                continue;
            };
            let idx = r * cols + c;
            let s = &mut stats[idx];
            if s.count == 0.0 {
                s.max_z = p.z;
                s.min_z = p.z;
                s.occupied = 1.0;
            } else {
                s.max_z = s.max_z.max(p.z);
                s.min_z = s.min_z.min(p.z);
            }
            s.count += 1.0;
            s.sum_z += p.z;
            s.sum_z2 += p.z * p.z;
            s.sum_i += p.intensity;
            members[idx].push(i);
        }

        // 8-connected components over occupied cells, in row-major seed order.
        let mut label = vec![usize::MAX; rows * cols];
        let mut clusters: Vec<(usize, Vec<usize>)> = Vec::new();
        for start in 0..rows * cols {
            if members[start].is_empty() || label[start] != usize::MAX {
                continue;
            }
            let id = clusters.len();
            label[start] = id;
            let mut queue = vec![start];
            let mut head = 0;
            let mut pts = Vec::new();
            while head < queue.len() {
                let cell = queue[head];
                head += 1;
                pts.extend_from_slice(&members[cell]);
                let (r, c) = (cell / cols, cell % cols);
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                            continue;
                        }
                        let n = nr as usize * cols + nc as usize;
                        if !members[n].is_empty() && label[n] == usize::MAX {
                            label[n] = id;
                            queue.push(n);
                        }
                    }
                }
            }
            pts.sort_unstable();
            clusters.push((start, pts));
        }

        let mut detections = Vec::new();
        let mut mc = Vec::new();
        for (seed_cell, pts) in &clusters {
            if pts.len() < self.cfg.min_points {
                continue;
            }
            let bbox = fit_oriented_box(pts.iter().map(|&i| &pc.points[i]), 0.1)
                .ok_or_else(|| DetectorError::DetectorFailure("empty cluster".into()))?;
            let (probs, logits) = self.class_distribution(bbox.size, pts.len());
            let mut det = Detection::from_probs(bbox, probs);
            if det.confidence < self.cfg.score_threshold {
                continue;
            }
            let (r, c) = self
                .grid
                .cell_of(bbox.center[0], bbox.center[1])
                .unwrap_or((seed_cell / cols, seed_cell % cols));
            let yaw = normalize_angle(2.0 * bbox.yaw) / 2.0;
            let slot = usize::from(yaw.abs() > std::f64::consts::FRAC_PI_4);
            det.anchor_index = Some(AnchorIndex {
                row: r,
                col: c,
                anchor: 2 * det.predicted_class + slot,
            });
            det.logits = Some(logits);
            mc.push(self.mc_samples(&det.class_probs, seed::derive(self.cfg.rng_seed, *seed_cell as u64)));
            detections.push(det);
        }

        let mut order: Vec<usize> = (0..detections.len()).collect();
        order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence).then(a.cmp(&b)));
        let detections: Vec<Detection> = order.iter().map(|&i| detections[i].clone()).collect();
        let mc: Vec<Vec<Vec<f64>>> = order.iter().map(|&i| mc[i].clone()).collect();

        Ok(DetectorOutput {
            detections,
            feature_maps: self.feature_maps(&stats),
            mc_softmax_samples: Some(mc),
        })
    }

    fn classes(&self) -> &[String] {
        &self.class_names
    }

    fn anchor_grid(&self) -> &AnchorGrid {
        &self.grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bev_iou, Box3D};
    use rand::Rng;

    /// Uniform returns inside an axis-aligned cuboid.
    fn cuboid(center: [f64; 3], size: [f64; 3], n: usize, seed: u64) -> Vec<Point> {
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

    fn stub() -> StubDetector {
        StubDetector::new(DetectorConfig::default()).unwrap()
    }

    #[test]
    fn empty_cloud_gives_no_detections() {
        let out = stub().detect(&PointCloud::default()).unwrap();
        assert!(out.detections.is_empty());
        assert_eq!(out.backbone_dims(), (80, 80));
    }

    #[test]
    fn car_sized_cluster_is_a_car() {
        let pts = cuboid([15.0, 2.0, -1.0], [3.9, 1.6, 1.56], 200, 1);
        let out = stub().detect(&PointCloud::new("f", pts)).unwrap();
        assert_eq!(out.detections.len(), 1);
        let d = &out.detections[0];
        assert_eq!(d.predicted_class, 0);
        assert!(d.is_valid());
        assert_eq!(d.confidence, logistic(2.0));
        let truth = Box3D::new([15.0, 2.0, -1.0], [3.9, 1.6, 1.56], 0.0);
        assert!(bev_iou(&d.bbox, &truth) > 0.8);
        let mc = out.mc_softmax_samples.as_ref().unwrap();
        assert_eq!(mc[0].len(), 10);
        for s in &mc[0] {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cluster_outside_fov_is_ignored() {
        let pts = cuboid([-10.0, 2.0, -1.0], [3.9, 1.6, 1.56], 200, 2);
        assert!(stub().detect(&PointCloud::new("f", pts)).unwrap().detections.is_empty());
    }

    #[test]
    fn sparse_cluster_is_ignored() {
        let pts = cuboid([10.0, 0.0, -1.0], [0.8, 0.6, 1.7], 29, 3);
        assert!(stub().detect(&PointCloud::new("f", pts)).unwrap().detections.is_empty());
    }

    #[test]
    fn two_clusters_two_detections_near_centroids() {
        let mut pts = cuboid([10.0, -5.0, -1.0], [3.9, 1.6, 1.56], 150, 4);
        pts.extend(cuboid([25.0, 6.0, -0.6], [0.8, 0.6, 1.73], 80, 5));
        let out = stub().detect(&PointCloud::new("f", pts.clone())).unwrap();
        assert_eq!(out.detections.len(), 2);
        let centroid = |s: &[Point]| {
            let n = s.len() as f64;
            (s.iter().map(|p| p.x).sum::<f64>() / n, s.iter().map(|p| p.y).sum::<f64>() / n)
        };
        let cents = [centroid(&pts[..150]), centroid(&pts[150..])];
        for d in &out.detections {
            let near = cents
                .iter()
                .any(|&(x, y)| (d.bbox.center[0] - x).hypot(d.bbox.center[1] - y) < 0.5);
            assert!(near);
        }
        assert!(out.detections[0].confidence >= out.detections[1].confidence);
    }

    #[test]
    fn detection_is_deterministic() {
        let pts = cuboid([12.0, 3.0, -1.0], [1.76, 0.6, 1.73], 90, 6);
        let pc = PointCloud::new("f", pts);
        let s = stub();
        assert_eq!(s.detect(&pc).unwrap(), s.detect(&pc).unwrap());
    }

    #[test]
    fn class_distribution_is_normalised() {
        let s = stub();
        for (size, n) in [([3.9, 1.6, 1.56], 30), ([0.3, 0.3, 0.3], 500), ([9.0, 3.0, 3.0], 45)] {
            let (p, l) = s.class_distribution(size, n);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| *v > 0.0));
            let max_fg = p[..3].iter().copied().fold(0.0, f64::max);
            assert_eq!(max_fg, logistic(n as f64 / 100.0));
            assert_eq!(l.len(), p.len());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = DetectorConfig::default();
        c.mc_samples = 0;
        assert!(StubDetector::new(c).is_err());
        let mut c = DetectorConfig::default();
        c.fov.x_max = 41.0;
        assert!(StubDetector::new(c).is_err());
        let mut c = DetectorConfig::default();
        c.fov.x_min = 50.0;
        assert!(StubDetector::new(c).is_err());
    }

    #[test]
    fn azimuth_range_of_forward_fov() {
        let (lo, hi) = Fov::default().azimuth_range();
        assert!((lo + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((hi - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let f = Fov { x_min: 5.0, x_max: 10.0, y_min: 0.0, y_max: 5.0, z_min: -1.0, z_max: 1.0 };
        let (lo, hi) = f.azimuth_range();
        assert_eq!(lo, 0.0);
        assert!((hi - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        let f = Fov { x_min: -5.0, x_max: 5.0, y_min: -5.0, y_max: 5.0, z_min: -1.0, z_max: 1.0 };
        assert_eq!(f.azimuth_range(), (-std::f64::consts::PI, std::f64::consts::PI));
    }
}
