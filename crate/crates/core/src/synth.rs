//! Synthetic scenes and OOD object databases for tests and demos.
//!
//! Frames hold a few in-distribution objects sampled as solid point blocks
//! of their class template size plus sparse clutter that never forms a
//! cluster. Database objects are blocks of their own sizes stored at a
//! random position in the field of view.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{ClassTemplate, DetectorConfig, Fov};
use crate::geometry::{bev_iou, Box3D, LabeledObject, OodCategory, Point, PointCloud};
use crate::inject::OodObject;
use crate::pcio::{self, Dataset, Frame, OodObjectRecord, OodSource, PcioError};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodClassSpec {
    pub name: String,
    pub size: [f64; 3],
    pub objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Points on an object 10 m away; scales with inverse range.
    pub points_at_10m: usize,
    pub clutter_points: usize,
    pub ood_classes: Vec<OodClassSpec>,
    pub seed: u64,
}

impl Default for OodClassSpec {
    fn default() -> Self {
        Self {
            name: "debris".into(),
            size: [1.2, 1.2, 0.8],
            objects: 4,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 50,
            min_objects: 1,
            max_objects: 3,
            points_at_10m: 200,
            clutter_points: 40,
            ood_classes: vec![
                OodClassSpec::default(),
                OodClassSpec {
                    name: "animal".into(),
                    size: [1.4, 0.5, 1.1],
                    objects: 4,
                },
            ],
            seed: 0,
        }
    }
}

fn block_points(bbox: &Box3D, n: usize, intensity: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<Point> {
    let (c, s) = (bbox.yaw.cos(), bbox.yaw.sin());
    (0..n)
        .map(|_| {
            let lx = (rng.random::<f64>() - 0.5) * bbox.size[0];
            let ly = (rng.random::<f64>() - 0.5) * bbox.size[1];
            let lz = (rng.random::<f64>() - 0.5) * bbox.size[2];
            Point::new(
                bbox.center[0] + c * lx - s * ly,
                bbox.center[1] + s * lx + c * ly,
                bbox.center[2] + lz,
                rng.random_range(intensity.0..intensity.1),
            )
        })
        .collect()
}

fn point_count(cfg: &SynthConfig, bbox: &Box3D) -> usize {
    let r = bbox.center[0].hypot(bbox.center[1]).max(1.0);
    ((cfg.points_at_10m as f64 * 10.0 / r) as usize).clamp(40, 4 * cfg.points_at_10m)
}

fn random_box(size: [f64; 3], z: f64, fov: &Fov, rng: &mut ChaCha8Rng) -> Box3D {
    let m = 3.0;
    Box3D::new(
        [
            rng.random_range(fov.x_min + m..fov.x_max - m),
            rng.random_range(fov.y_min + m..fov.y_max - m),
            z,
        ],
        size,
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

/// Boxes grown by 2 m must not touch.
fn spaced(b: &Box3D, others: &[Box3D]) -> bool {
    let grow = |x: &Box3D| Box3D::new(x.center, [x.size[0] + 2.0, x.size[1] + 2.0, x.size[2]], x.yaw);
    others.iter().all(|o| bev_iou(&grow(b), &grow(o)) == 0.0)
}

fn make_frame(i: usize, cfg: &SynthConfig, classes: &[ClassTemplate], fov: &Fov, rng: &mut ChaCha8Rng) -> Frame {
    let k = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut labels = Vec::new();
    let mut points = Vec::new();
    let mut tries = 0;
    while labels.len() < k && tries < 200 {
        tries += 1;
        let t = &classes[rng.random_range(0..classes.len())];
        let b = random_box(t.size, t.z_center, fov, rng).quantized();
        if !spaced(&b, &boxes) {
            continue;
        }
        points.extend(block_points(&b, point_count(cfg, &b), (0.1, 0.6), rng));
        labels.push(LabeledObject::in_distribution(b, t.name.clone()));
        boxes.push(b);
    }
    // clutter keeps 1.5 m clear of objects so it never joins a cluster
    let halo: Vec<Box3D> = boxes
        .iter()
        .map(|b| Box3D::new(b.center, [b.size[0] + 3.0, b.size[1] + 3.0, 100.0], b.yaw))
        .collect();
    let mut placed = 0;
    while placed < cfg.clutter_points {
        let p = Point::new(
            rng.random_range(fov.x_min..fov.x_max),
            rng.random_range(fov.y_min..fov.y_max),
            rng.random_range(fov.z_min..fov.z_max),
            rng.random_range(0.0..0.3),
        );
        if halo.iter().all(|h| !h.contains(&p)) {
            points.push(p);
            placed += 1;
        }
    }
    Frame {
        cloud: PointCloud::new(format!("{i:06}"), points),
        labels,
    }
}

/// In-distribution frames for the detector's classes.
pub fn make_dataset(cfg: &SynthConfig, det: &DetectorConfig) -> Dataset {
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::name_tag("frames")));
    let frames = (0..cfg.frames)
        .map(|i| make_frame(i, cfg, &det.classes, &det.fov, &mut rng))
        .collect();
    Dataset {
        classes: det.class_names(),
        frames,
    }
}

/// OOD database objects. Sources alternate between synthetic and real.
pub fn make_ood_objects(cfg: &SynthConfig, fov: &Fov) -> Vec<OodObject> {
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::name_tag("objects")));
    let mut out = Vec::new();
    for c in &cfg.ood_classes {
        for j in 0..c.objects {
            let b = random_box(c.size, -1.0, fov, &mut rng);
            let n = point_count(cfg, &b);
            let id = format!("{}_{j:03}", c.name);
            let source = if j % 2 == 0 { OodSource::Synthetic } else { OodSource::Real };
            let pts = block_points(&b, n, (0.4, 0.9), &mut rng);
            out.push(OodObject {
                record: OodObjectRecord {
                    object_id: id.clone(),
                    class_name: c.name.clone(),
                    source,
                    category: OodCategory::MisdetectedOodBackground,
                    original_range: b.center[0].hypot(b.center[1]),
                    original_azimuth: b.center[1].atan2(b.center[0]),
                    cloud_path: PathBuf::from(format!("clouds/{id}.bin")),
                },
                cloud: PointCloud::new(id, pts),
            });
        }
    }
    out
}

pub fn save_ood_objects(objects: &[OodObject], dir: &Path) -> Result<(), PcioError> {
    for o in objects {
        pcio::write_cloud(&o.cloud, &dir.join(&o.record.cloud_path))?;
    }
    let records: Vec<OodObjectRecord> = objects.iter().map(|o| o.record.clone()).collect();
    pcio::write_ood_db(&records, dir)
}

/// Writes a dataset under `dir/id` and a database under `dir/ood_db`.
/// Returns the manifest path and the database directory.
pub fn write_fixture(cfg: &SynthConfig, det: &DetectorConfig, dir: &Path) -> Result<(PathBuf, PathBuf), PcioError> {
    let manifest = pcio::save_dataset(&make_dataset(cfg, det), &dir.join("id"))?;
    let db = dir.join("ood_db");
    save_ood_objects(&make_ood_objects(cfg, &det.fov), &db)?;
    Ok((manifest, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Detector, StubDetector};
    use crate::geometry::points_in_box;

    #[test]
    fn objects_are_detected() {
        let det = DetectorConfig::default();
        let cfg = SynthConfig { frames: 5, ..Default::default() };
        let ds = make_dataset(&cfg, &det);
        let stub = StubDetector::new(det).unwrap();
        for f in &ds.frames {
            assert!(!f.labels.is_empty());
            for l in &f.labels {
                assert!(points_in_box(&f.cloud, &l.bbox).len() >= 40);
            }
            let out = stub.detect(&f.cloud).unwrap();
            for l in &f.labels {
                assert!(out.detections.iter().any(|d| bev_iou(&d.bbox, &l.bbox) >= 0.5));
            }
        }
    }

    #[test]
    fn deterministic() {
        let det = DetectorConfig::default();
        let cfg = SynthConfig { frames: 3, ..Default::default() };
        assert_eq!(make_dataset(&cfg, &det), make_dataset(&cfg, &det));
        assert_eq!(make_ood_objects(&cfg, &det.fov), make_ood_objects(&cfg, &det.fov));
    }
}
