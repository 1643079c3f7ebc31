//! Domain types and oriented-box geometry.
//!
//! Boxes are yaw-rotated cuboids with a geometric center. Bird's-eye-view
//! overlap is computed by clipping the two rotated footprint rectangles
//! against each other (Sutherland–Hodgman) and measuring the clipped polygon
//! with the shoelace formula.

use std::f64::consts::PI;

/// Intersection areas below this are treated as empty.
pub const MIN_CLIP_AREA: f64 = 1e-12;

/// A single LiDAR return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    /// Planar distance to the sensor origin.
    pub fn range(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn azimuth(&self) -> f64 {
        self.y.atan2(self.x)
    }
}

/// One LiDAR frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(frame_id: impl Into<String>, points: Vec<Point>) -> Self {
        Self {
            points,
            frame_id: frame_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks finite coordinates and intensities in `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        self.points.iter().all(|p| {
            p.x.is_finite()
                && p.y.is_finite()
                && p.z.is_finite()
                && (0.0..=1.0).contains(&p.intensity)
        })
    }

    /// Concatenates `other` after `self`, keeping `self`'s frame id.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = Vec::with_capacity(self.len() + other.len());
        points.extend_from_slice(&self.points);
        points.extend_from_slice(&other.points);
        PointCloud::new(self.frame_id.clone(), points)
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.intensity).collect()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// An oriented 3D box. `size` is `[length, width, height]`; length runs along
/// the heading given by `yaw`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn length(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|s| s.is_finite() && *s > 0.0)
            && self.center.iter().all(|c| c.is_finite())
            && self.yaw > -PI
            && self.yaw <= PI
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn z_min(&self) -> f64 {
        self.center[2] - 0.5 * self.size[2]
    }

    pub fn z_max(&self) -> f64 {
        self.center[2] + 0.5 * self.size[2]
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.size[0];
        let hw = 0.5 * self.size[1];
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| {
            [
                self.center[0] + c * u - s * v,
                self.center[1] + s * u + c * v,
            ]
        })
    }

    /// Expresses a world point in the box frame (origin at the center,
    /// x along the heading).
    pub fn to_local(&self, p: &Point) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.center[0];
        let dy = p.y - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p.z - self.center[2]]
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: &Point) -> bool {
        let [lx, ly, lz] = self.to_local(p);
        lx.abs() <= 0.5 * self.size[0]
            && ly.abs() <= 0.5 * self.size[1]
            && lz.abs() <= 0.5 * self.size[2]
    }

    /// The same box rotated about the sensor's vertical axis.
    pub fn rotated_about_origin(&self, delta: f64) -> Box3D {
        let (s, c) = delta.sin_cos();
        let [x, y, z] = self.center;
        Box3D::new([c * x - s * y, s * x + c * y, z], self.size, self.yaw + delta)
    }

    /// Grows every side by `margin` on both ends.
    pub fn padded(&self, margin: f64) -> Box3D {
        Box3D {
            size: self.size.map(|s| s + 2.0 * margin),
            ..*self
        }
    }

    /// Rounds every parameter to the nearest `f32`, the precision of label files.
    pub fn quantized(&self) -> Box3D {
        let q = |v: f64| v as f32 as f64;
        Box3D {
            center: self.center.map(q),
            size: self.size.map(q),
            yaw: quantize_yaw(self.yaw),
        }
    }
}

/// Rounds a heading to `f32` while staying inside `(-pi, pi]`.
fn quantize_yaw(yaw: f64) -> f64 {
    let y = normalize_angle(yaw) as f32;
    // Stepping the bit pattern down moves toward zero for either sign.
    let y = if f64::from(y) > PI || f64::from(y) <= -PI {
        f32::from_bits(y.to_bits() - 1)
    } else {
        y
    };
    f64::from(y)
}

/// Per-prediction grid reference: backbone cell plus anchor template slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AnchorIndex {
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
}

/// A detector prediction. `class_probs` holds the foreground classes in order
/// followed by a trailing background entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class_probs: Vec<f64>,
    pub predicted_class: usize,
    pub anchor_index: Option<AnchorIndex>,
    pub confidence: f64,
    /// Pre-softmax scores, when the detector exposes them.
    pub logits: Option<Vec<f64>>,
}

impl Detection {
    /// Builds a detection from a full class distribution, deriving the
    /// predicted class and confidence from the foreground entries.
    pub fn from_probs(bbox: Box3D, class_probs: Vec<f64>) -> Self {
        let fg = &class_probs[..class_probs.len().saturating_sub(1)];
        let (predicted_class, confidence) = argmax(fg);
        Self {
            bbox,
            class_probs,
            predicted_class,
            anchor_index: None,
            confidence,
            logits: None,
        }
    }

    pub fn num_fg_classes(&self) -> usize {
        self.class_probs.len().saturating_sub(1)
    }

    pub fn fg_probs(&self) -> &[f64] {
        &self.class_probs[..self.num_fg_classes()]
    }

    pub fn is_valid(&self) -> bool {
        let sum: f64 = self.class_probs.iter().sum();
        self.class_probs.len() >= 2
            && self.class_probs.iter().all(|p| *p >= 0.0)
            && (sum - 1.0).abs() <= 1e-9
            && self.confidence == argmax(self.fg_probs()).1
            && self.bbox.is_valid()
    }
}

/// Index and value of the first maximum. Returns `(0, NEG_INFINITY)` on empty input.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// The eight-way object taxonomy: detected/missed × FG/BG × in/out of the
/// training distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OodCategory {
    /// 1: detected FG object from the training distribution.
    DetectedIdForeground,
    /// 2: missed FG object from the training distribution.
    MissedIdForeground,
    /// 3: detected FG object outside the training distribution.
    DetectedOodForeground,
    /// 4: missed FG object outside the training distribution.
    MissedOodForeground,
    /// 5: common BG object misdetected as FG.
    MisdetectedIdBackground,
    /// 6: common BG object left undetected.
    UndetectedIdBackground,
    /// 7: uncommon BG object misdetected as FG.
    MisdetectedOodBackground,
    /// 8: uncommon BG object left undetected.
    UndetectedOodBackground,
}

impl OodCategory {
    pub const ALL: [OodCategory; 8] = [
        OodCategory::DetectedIdForeground,
        OodCategory::MissedIdForeground,
        OodCategory::DetectedOodForeground,
        OodCategory::MissedOodForeground,
        OodCategory::MisdetectedIdBackground,
        OodCategory::UndetectedIdBackground,
        OodCategory::MisdetectedOodBackground,
        OodCategory::UndetectedOodBackground,
    ];

    /// The 1-based number used in files.
    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.get(usize::from(n).checked_sub(1)?).copied()
    }

    /// Categories 3, 5 and 7 are the ones the toolkit targets.
    pub fn in_scope(self) -> bool {
        matches!(
            self,
            OodCategory::DetectedOodForeground
                | OodCategory::MisdetectedIdBackground
                | OodCategory::MisdetectedOodBackground
        )
    }

    /// Everything from category 3 onwards is OOD for the FG distribution.
    pub fn is_ood(self) -> bool {
        self.number() >= 3
    }
}

/// A ground-truth object in a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledObject {
    pub bbox: Box3D,
    pub class_name: String,
    pub is_ood: bool,
    pub category: OodCategory,
}

impl LabeledObject {
    pub fn in_distribution(bbox: Box3D, class_name: impl Into<String>) -> Self {
        Self {
            bbox,
            class_name: class_name.into(),
            is_ood: false,
            category: OodCategory::DetectedIdForeground,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.is_ood == self.category.is_ood()
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc.abs()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clips `subject` by the convex counter-clockwise polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom == 0.0 {
        return q;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn box_key(b: &Box3D) -> [f64; 7] {
    [
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0],
        b.size[1],
        b.size[2],
        b.yaw,
    ]
}

/// Orders a pair canonically so the clip is evaluated identically for (a, b)
/// and (b, a).
fn canonical<'a>(a: &'a Box3D, b: &'a Box3D) -> (&'a Box3D, &'a Box3D) {
    let ka = box_key(a);
    let kb = box_key(b);
    match ka.partial_cmp(&kb) {
        Some(std::cmp::Ordering::Greater) => (b, a),
        _ => (a, b),
    }
}

/// Area of the footprint intersection.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = canonical(a, b);
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let ra = 0.5 * a.size[0].hypot(a.size[1]);
    let rb = 0.5 * b.size[0].hypot(b.size[1]);
    if dx.hypot(dy) > ra + rb {
        return 0.0;
    }
    let clipped = clip_convex(&a.bev_corners(), &b.bev_corners());
    let area = polygon_area(&clipped);
    if area < MIN_CLIP_AREA {
        0.0
    } else {
        area.min(a.bev_area()).min(b.bev_area())
    }
}

/// Rotated bird's-eye-view intersection over union.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Vertical overlap of two boxes.
pub fn z_overlap(a: &Box3D, b: &Box3D) -> f64 {
    (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0)
}

/// Full 3D intersection over union: BEV intersection times vertical overlap.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter_bev = bev_intersection_area(a, b);
    if inter_bev == 0.0 {
        return 0.0;
    }
    let hz = z_overlap(a, b);
    if hz == 0.0 {
        return 0.0;
    }
    let inter = inter_bev * hz;
    let union = a.volume() + b.volume() - inter;
    let bev = (inter_bev / (a.bev_area() + b.bev_area() - inter_bev)).clamp(0.0, 1.0);
    (inter / union).clamp(0.0, 1.0).min(bev)
}

/// Indices of the points inside `bbox`, boundary included.
pub fn points_in_box(pc: &PointCloud, bbox: &Box3D) -> Vec<usize> {
    pc.points
        .iter()
        .enumerate()
        .filter(|(_, p)| bbox.contains(p))
        .map(|(i, _)| i)
        .collect()
}

/// Rotates every point about the sensor's vertical axis. Range, height and
/// intensity are unchanged.
pub fn rotate_about_origin(pc: &PointCloud, delta_azimuth: f64) -> PointCloud {
    if delta_azimuth == 0.0 {
        return pc.clone();
    }
    let (s, c) = delta_azimuth.sin_cos();
    let points = pc
        .points
        .iter()
        .map(|p| Point::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z, p.intensity))
        .collect();
    PointCloud::new(pc.frame_id.clone(), points)
}

/// Fits a tight oriented box around a point set. The heading follows the
/// principal axis of the BEV scatter, so `length >= width`. Every extent is
/// floored at `min_extent`. Returns `None` for an empty set.
pub fn fit_oriented_box<'a, I>(points: I, min_extent: f64) -> Option<Box3D>
where
    I: IntoIterator<Item = &'a Point>,
    I::IntoIter: Clone,
{
    let iter = points.into_iter();
    let n = iter.clone().count();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in iter.clone() {
        mx += p.x;
        my += p.y;
    }
    mx /= nf;
    my /= nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in iter.clone() {
        let dx = p.x - mx;
        let dy = p.y - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let yaw = if sxy.abs() < 1e-15 * (sxx + syy).max(1e-300) {
        if sxx >= syy {
            0.0
        } else {
            PI / 2.0
        }
    } else {
        0.5 * (2.0 * sxy).atan2(sxx - syy)
    };
    let (s, c) = yaw.sin_cos();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in iter {
        let u = c * p.x + s * p.y;
        let v = -s * p.x + c * p.y;
        for (k, val) in [u, v, p.z].into_iter().enumerate() {
            lo[k] = lo[k].min(val);
            hi[k] = hi[k].max(val);
        }
    }
    let cu = 0.5 * (lo[0] + hi[0]);
    let cv = 0.5 * (lo[1] + hi[1]);
    let cz = 0.5 * (lo[2] + hi[2]);
    let size = [
        (hi[0] - lo[0]).max(min_extent),
        (hi[1] - lo[1]).max(min_extent),
        (hi[2] - lo[2]).max(min_extent),
    ];
    let center = [c * cu - s * cv, s * cu + c * cv, cz];
    Some(Box3D::new(center, size, yaw))
}
