//! Per-object feature extraction from detector feature maps.
//!
//! Training samples come from anchors that are positive for a ground-truth
//! object, one sample per positive anchor with no aggregation. Test samples
//! come from the anchor each final prediction was decoded from. Maps coarser
//! than the backbone grid are upsampled by nearest neighbour first.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::detector::DetectorOutput;
use crate::geometry::{bev_iou, Box3D, LabeledObject};

#[derive(Debug, Error, PartialEq)]
pub enum FeatError {
    #[error("cannot upsample {from_h}x{from_w} to {to_h}x{to_w}: not a common integer scale")]
    NonIntegerScale {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },
    #[error("layer {0} is not present in the detector output")]
    MissingLayer(LayerTag),
    #[error("detection {0} carries no anchor index")]
    MissingAnchorIndex(usize),
    #[error("detection {0} carries no logits")]
    MissingLogits(usize),
    #[error("anchor cell ({row}, {col}) outside the {height}x{width} map")]
    CellOutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
}

/// Which layer a feature vector was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Conv2x,
    Conv4x,
    Conv8x,
    Backbone,
    /// Pre-softmax class scores of a prediction.
    Logits,
}

impl LayerTag {
    pub const MAPS: [LayerTag; 4] = [
        LayerTag::Conv2x,
        LayerTag::Conv4x,
        LayerTag::Conv8x,
        LayerTag::Backbone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::Conv2x => "conv2x",
            LayerTag::Conv4x => "conv4x",
            LayerTag::Conv8x => "conv8x",
            LayerTag::Backbone => "backbone",
            LayerTag::Logits => "logits",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv2x" => Some(LayerTag::Conv2x),
            "conv4x" => Some(LayerTag::Conv4x),
            "conv8x" => Some(LayerTag::Conv8x),
            "backbone" => Some(LayerTag::Backbone),
            "logits" => Some(LayerTag::Logits),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [
            LayerTag::Conv2x,
            LayerTag::Conv4x,
            LayerTag::Conv8x,
            LayerTag::Backbone,
            LayerTag::Logits,
        ]
        .get(usize::from(c))
        .copied()
    }
}

impl std::fmt::Display for LayerTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LayerTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s).ok_or_else(|| format!("unknown layer '{s}'"))
    }
}

/// A row-major `height x width x channels` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub layer: LayerTag,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    /// Cell size relative to the backbone grid; 1 for the backbone itself.
    pub stride_vs_backbone: usize,
}

impl FeatureMap {
    pub fn zeros(layer: LayerTag, height: usize, width: usize, channels: usize, stride: usize) -> Self {
        Self {
            layer,
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
            stride_vs_backbone: stride,
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }
}

/// Nearest-neighbour upsampling to `target = (height, width)`.
pub fn upsample_nearest(fm: &FeatureMap, target: (usize, usize)) -> Result<FeatureMap, FeatError> {
    let (th, tw) = target;
    if (th, tw) == (fm.height, fm.width) {
        return Ok(fm.clone());
    }
    let err = FeatError::NonIntegerScale {
        from_h: fm.height,
        from_w: fm.width,
        to_h: th,
        to_w: tw,
    };
    if fm.height == 0 || fm.width == 0 || th % fm.height != 0 || tw % fm.width != 0 {
        return Err(err);
    }
    let s = th / fm.height;
    if tw / fm.width != s {
        return Err(err);
    }
    let mut out = FeatureMap::zeros(fm.layer, th, tw, fm.channels, 1);
    for y in 0..th {
        for x in 0..tw {
            out.cell_mut(y, x).copy_from_slice(fm.cell(y / s, x / s));
        }
    }
    Ok(out)
}

/// One anchor shape placed at every backbone cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTemplate {
    pub class_index: usize,
    /// `[length, width, height]`.
    pub size: [f64; 3],
    pub yaw: f64,
    pub z_center: f64,
}

/// The backbone anchor grid. Row `r` covers `y` in
/// `[y_min + r*cell, y_min + (r+1)*cell)`; column `c` covers `x` likewise.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub templates: Vec<AnchorTemplate>,
    /// Positive-match IoU threshold per class index.
    pub pos_iou: Vec<f64>,
}

impl AnchorGrid {
    /// Default per-class positive threshold: 0.6 for cars, 0.5 otherwise.
    pub fn default_pos_iou(class_name: &str) -> f64 {
        if class_name.eq_ignore_ascii_case("car") {
            0.6
        } else {
            0.5
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell_size,
            self.y_min + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// The cell containing `(x, y)`, if any.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x_min) / self.cell_size).floor();
        let r = ((y - self.y_min) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    pub fn anchor_box(&self, row: usize, col: usize, anchor: usize) -> Box3D {
        let t = &self.templates[anchor];
        let (x, y) = self.cell_center(row, col);
        Box3D::new([x, y, t.z_center], t.size, t.yaw)
    }

    pub fn threshold(&self, class_index: usize) -> f64 {
        self.pos_iou.get(class_index).copied().unwrap_or(0.5)
    }
}

/// A positive anchor for a ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PositiveAnchor {
    pub object_index: usize,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
    pub class_index: usize,
}

/// Finds anchors positive for each in-distribution ground-truth object of a
/// known class.
///
/// An anchor of the object's class is positive when its BEV IoU with the
/// object reaches the class threshold. An object with no such anchor gets its
/// best-overlapping anchor (lowest row, column, slot on ties) forced positive,
/// provided that overlap is nonzero.
pub fn assign_positive_anchors(gt: &[LabeledObject], classes: &[String], grid: &AnchorGrid) -> Vec<PositiveAnchor> {
    let mut out = Vec::new();
    for (oi, obj) in gt.iter().enumerate() {
        if obj.is_ood {
            continue;
        }
        let Some(ci) = classes.iter().position(|c| *c == obj.class_name) else {
            continue;
        };
        let thr = grid.threshold(ci);
        let obj_r = 0.5 * obj.bbox.size[0].hypot(obj.bbox.size[1]);
        let mut best: Option<(f64, usize, usize, usize)> = None;
        let mut found = false;
        for (ai, t) in grid.templates.iter().enumerate() {
            if t.class_index != ci {
                continue;
            }
            let reach = obj_r + 0.5 * t.size[0].hypot(t.size[1]) + grid.cell_size;
            let (c0, c1) = span(obj.bbox.center[0] - reach, obj.bbox.center[0] + reach, grid.x_min, grid.cell_size, grid.cols);
            let (r0, r1) = span(obj.bbox.center[1] - reach, obj.bbox.center[1] + reach, grid.y_min, grid.cell_size, grid.rows);
            for r in r0..r1 {
                for c in c0..c1 {
                    let iou = bev_iou(&grid.anchor_box(r, c, ai), &obj.bbox);
                    if iou >= thr {
                        out.push(PositiveAnchor {
                            object_index: oi,
                            row: r,
                            col: c,
                            anchor: ai,
                            class_index: ci,
                        });
                        found = true;
                    }
                    let better = match best {
                        None => iou > 0.0,
                        Some((b, br, bc, ba)) => iou > b || (iou == b && (r, c, ai) < (br, bc, ba)),
                    };
                    if better {
                        best = Some((iou, r, c, ai));
                    }
                }
            }
        }
        if !found {
            if let Some((_, r, c, a)) = best {
                out.push(PositiveAnchor {
                    object_index: oi,
                    row: r,
                    col: c,
                    anchor: a,
                    class_index: ci,
                });
            }
        }
    }
    out.sort();
    out
}

fn span(lo: f64, hi: f64, origin: f64, cell: f64, n: usize) -> (usize, usize) {
    let a = ((lo - origin) / cell).floor().max(0.0);
    let b = ((hi - origin) / cell).ceil().max(0.0);
    ((a as usize).min(n), (b as usize + 1).min(n))
}

/// Where a feature sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleSource {
    GtAnchor,
    Prediction,
}

/// A single per-object feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub vector: Vec<f32>,
    pub class_label: usize,
    pub is_ood: bool,
    pub source: SampleSource,
    pub frame_id: String,
    pub layer: LayerTag,
}

impl FeatureSample {
    pub fn vector_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&v| f64::from(v)).collect()
    }
}

fn upsampled_layer(out: &DetectorOutput, layer: LayerTag, dims: (usize, usize)) -> Result<FeatureMap, FeatError> {
    let fm = out.feature_maps.get(&layer).ok_or(FeatError::MissingLayer(layer))?;
    upsample_nearest(fm, dims)
}

fn read_cell(fm: &FeatureMap, row: usize, col: usize) -> Result<Vec<f32>, FeatError> {
    if row >= fm.height || col >= fm.width {
        return Err(FeatError::CellOutOfRange {
            row,
            col,
            height: fm.height,
            width: fm.width,
        });
    }
    Ok(fm.cell(row, col).to_vec())
}

/// One training sample per positive anchor, read from `layer` at the anchor's cell.
pub fn extract_training_samples(
    out: &DetectorOutput,
    gt: &[LabeledObject],
    classes: &[String],
    grid: &AnchorGrid,
    layer: LayerTag,
    frame_id: &str,
) -> Result<Vec<FeatureSample>, FeatError> {
    let positives = assign_positive_anchors(gt, classes, grid);
    if positives.is_empty() {
        return Ok(Vec::new());
    }
    let fm = upsampled_layer(out, layer, (grid.rows, grid.cols))?;
    positives
        .iter()
        .map(|p| {
            Ok(FeatureSample {
                vector: read_cell(&fm, p.row, p.col)?,
                class_label: p.class_index,
                is_ood: false,
                source: SampleSource::GtAnchor,
                frame_id: frame_id.to_string(),
                layer,
            })
        })
        .collect()
}

/// One test sample per detection. For [`LayerTag::Logits`] the vector is the
/// detection's logits; otherwise it is read at the detection's anchor cell.
/// Samples are labelled in-distribution; callers relabel after matching.
pub fn extract_test_samples(out: &DetectorOutput, layer: LayerTag, frame_id: &str) -> Result<Vec<FeatureSample>, FeatError> {
    if out.detections.is_empty() {
        return Ok(Vec::new());
    }
    let mut samples = Vec::with_capacity(out.detections.len());
    if layer == LayerTag::Logits {
        for (i, d) in out.detections.iter().enumerate() {
            let logits = d.logits.as_ref().ok_or(FeatError::MissingLogits(i))?;
            samples.push(FeatureSample {
                vector: logits.iter().map(|&v| v as f32).collect(),
                class_label: d.predicted_class,
                is_ood: false,
                source: SampleSource::Prediction,
                frame_id: frame_id.to_string(),
                layer,
            });
        }
        return Ok(samples);
    }
    let (h, w) = out.backbone_dims();
    let fm = upsampled_layer(out, layer, (h, w))?;
    for (i, d) in out.detections.iter().enumerate() {
        let a = d.anchor_index.ok_or(FeatError::MissingAnchorIndex(i))?;
        samples.push(FeatureSample {
            vector: read_cell(&fm, a.row, a.col)?,
            class_label: d.predicted_class,
            is_ood: false,
            source: SampleSource::Prediction,
            frame_id: frame_id.to_string(),
            layer,
        });
    }
    Ok(samples)
}

/// Groups samples by class label, preserving order within a class.
pub fn group_by_class(samples: &[FeatureSample]) -> BTreeMap<usize, Vec<Vec<f64>>> {
    let mut m: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for s in samples {
        m.entry(s.class_label).or_default().push(s.vector_f64());
    }
    m
}
