use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use ood_core::detector::{Detector, DetectorConfig, StubDetector};
use ood_core::featx::{assign_positive_anchors, upsample_nearest, FeatureMap, LayerTag};
use ood_core::flow::{self, FlowConfig, FlowModel, TrainConfig};
use ood_core::geometry::{Box3D, Detection, LabeledObject, Point, PointCloud};
use ood_core::inject::{self, InjectConfig};
use ood_core::metrics::{self, ScoredEntry, ScoredSet, SweepConfig, SweepFrame, SweepGt, SweepPrediction};
use ood_core::mine::{cluster_view, dbscan, union_outliers, MineConfig};
use ood_core::scorers::{self, MahalanobisConfig, OcSvmConfig};
use ood_core::seed;
use ood_core::synth::{make_dataset, make_ood_objects, SynthConfig};

fn scored(pairs: &[(f64, bool)]) -> ScoredSet {
    ScoredSet::new(pairs.iter().map(|&(s, o)| ScoredEntry::new(s, o)).collect()).unwrap()
}

fn two_class(max: usize) -> impl Strategy<Value = Vec<(i32, bool)>> {
    prop::collection::vec((-40i32..40, any::<bool>()), 2..max).prop_map(|mut v| {
        v[0].1 = true;
        v[1].1 = false;
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_rank_symmetry(v in two_class(80)) {
        let auc = |f: &dyn Fn(f64, bool) -> (f64, bool)| {
            let pairs: Vec<(f64, bool)> = v.iter().map(|&(s, o)| f(s as f64, o)).collect();
            metrics::auroc(&scored(&pairs)).unwrap()
        };
        let base = auc(&|s, o| (s, o));
        prop_assert_eq!(base + auc(&|s, o| (-s, o)), 1.0);
        prop_assert_eq!(base + auc(&|s, o| (s, !o)), 1.0);
        prop_assert_eq!(base, auc(&|s, o| (-s, !o)));
    }

    #[test]
    fn metrics_invariant_under_increasing_transforms(v in two_class(80)) {
        let base: Vec<(f64, bool)> = v.iter().map(|&(s, o)| (s as f64, o)).collect();
        let cubic: Vec<(f64, bool)> = base.iter().map(|&(s, o)| (s * s * s + 3.0 * s, o)).collect();
        let expo: Vec<(f64, bool)> = base.iter().map(|&(s, o)| ((s / 7.0).exp(), o)).collect();
        let want = metrics::evaluate(&scored(&base)).unwrap().values;
        for t in [cubic, expo] {
            let got = metrics::evaluate(&scored(&t)).unwrap().values;
            prop_assert_eq!(got.auroc, want.auroc);
            prop_assert_eq!(got.fpr_at_95_tpr, want.fpr_at_95_tpr);
            prop_assert!((got.aupr_in - want.aupr_in).abs() < 1e-12);
            prop_assert!((got.aupr_out - want.aupr_out).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_sets_are_perfect(id in prop::collection::vec(0.0..1.0f64, 1..40),
                                  ood in prop::collection::vec(2.0..3.0f64, 1..40)) {
        let pairs: Vec<(f64, bool)> = id.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
        let m = metrics::evaluate(&scored(&pairs)).unwrap().values;
        prop_assert_eq!(m.auroc, 1.0);
        prop_assert_eq!(m.aupr_in, 1.0);
        prop_assert_eq!(m.aupr_out, 1.0);
        prop_assert_eq!(m.fpr_at_95_tpr, 0.0);
        prop_assert!((m.detection_error - 0.025).abs() < 1e-15);
    }

    #[test]
    fn single_balanced_repeat_matches_direct(per in 1usize..8, classes in 1usize..4, seed_ in any::<u64>(),
                                            raw in prop::collection::vec(-5.0..5.0f64, 64)) {
        let mut entries = Vec::new();
        let mut k = 0;
        for c in 0..classes {
            for is_ood in [false, true] {
                for _ in 0..per {
                    entries.push(ScoredEntry { score: raw[k % raw.len()] + if is_ood { 1.0 } else { 0.0 }, is_ood, class_label: c, frame_id: format!("{k}") });
                    k += 1;
                }
            }
        }
        let s = ScoredSet::new(entries).unwrap();
        let direct = metrics::evaluate(&s).unwrap().values.to_array();
        let rep = metrics::balanced_eval(&s, 1, seed_).unwrap();
        for (a, b) in rep.mean.to_array().iter().zip(direct) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(rep.sd.to_array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sweep_counts_are_monotone(preds in prop::collection::vec((0.0..20.0f64, 0..2usize, 0.0..1.0f64, 0.0..1.0f64), 1..25),
                                 oods in prop::collection::vec(0.0..20.0f64, 0..4),
                                 mut ts in prop::collection::vec(0.0..1.0f64, 2..10)) {
        let b = |x: f64| Box3D::new([x, 0.0, 0.0], [2.0, 1.0, 1.0], 0.0);
        let frame = SweepFrame {
            predictions: preds.iter().map(|&(x, c, conf, o)| SweepPrediction { bbox: b(x), class_label: c, confidence: conf, ood_score: o }).collect(),
            gt: oods.iter().map(|&x| SweepGt { bbox: b(x), class_label: usize::MAX, is_ood: true })
                .chain([SweepGt { bbox: b(5.0), class_label: 0, is_ood: false }]).collect(),
        };
        ts.sort_by(f64::total_cmp);
        let rows = metrics::ood_threshold_sweep(&[frame], &ts, &SweepConfig::default()).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[1].n_removed <= w[0].n_removed);
            prop_assert!(w[1].ood_recall <= w[0].ood_recall);
        }
    }

    #[test]
    fn mutual_information_identity(set in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 3), 1..12)) {
        let set: Vec<Vec<f64>> = set.iter().map(|v| { let z: f64 = v.iter().sum(); v.iter().map(|x| x / z).collect() }).collect();
        let u = scorers::score_uncertainty(&set);
        prop_assert!(u.mutual_information >= -1e-12);
        prop_assert!((u.mutual_information - (u.predictive_entropy - u.aleatoric_entropy)).abs() <= 1e-12);
        prop_assert!(u.predictive_entropy <= 3f64.ln() + 1e-12);
    }

    #[test]
    fn dbscan_partition_is_permutation_consistent(pts in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..60),
                                                  eps in 0.2..1.5f64, min_pts in 1usize..6, seed_ in any::<u64>()) {
        let p: Vec<Vec<f64>> = pts.iter().map(|&(x, y)| vec![x, y]).collect();
        let mut perm: Vec<usize> = (0..p.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut seed::rng(seed_));
        let q: Vec<Vec<f64>> = perm.iter().map(|&i| p[i].clone()).collect();
        let a = dbscan(&p, eps, min_pts);
        let b = dbscan(&q, eps, min_pts);
        let noise_a: BTreeSet<usize> = (0..p.len()).filter(|&i| a[i].is_none()).collect();
        let noise_b: BTreeSet<usize> = (0..p.len()).filter(|&k| b[k].is_none()).map(|k| perm[k]).collect();
        prop_assert_eq!(&noise_a, &noise_b);
        // core points must agree on co-membership; borders may legitimately move
        let core: Vec<bool> = (0..p.len()).map(|i| {
            (0..p.len()).filter(|&j| p[i].iter().zip(&p[j]).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt() <= eps).count() >= min_pts
        }).collect();
        let mut inv = vec![0; p.len()];
        for (k, &i) in perm.iter().enumerate() { inv[i] = k; }
        for i in (0..p.len()).filter(|&i| core[i]) {
            for j in (0..p.len()).filter(|&j| core[j]) {
                prop_assert_eq!(a[i] == a[j], b[inv[i]] == b[inv[j]]);
            }
        }
    }

    #[test]
    fn dropping_a_clustering_never_adds_outliers(raw in prop::collection::vec((3.5..5.0f64, 1.5..2.0f64, 1.3..1.8f64), 12..40)) {
        let cfg = MineConfig::default();
        let views: Vec<_> = [(0, 1), (0, 2), (1, 2)].iter().map(|&(a, b)| {
            let pts: Vec<Vec<f64>> = raw.iter().map(|t| { let v = [t.0, t.1, t.2]; vec![v[a], v[b]] }).collect();
            cluster_view("v", &pts, &cfg)
        }).collect();
        let all = union_outliers(&views);
        for skip in 0..views.len() {
            let rest = union_outliers(views.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, c)| c));
            prop_assert!(rest.is_subset(&all));
        }
    }

    #[test]
    fn mahalanobis_affine_invariance(raw in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64), 12..40),
                                     a in prop::collection::vec(-1.0..1.0f64, 9),
                                     shift in prop::collection::vec(-10.0..10.0f64, 3),
                                     q in (-4.0..4.0f64, -4.0..4.0f64, -4.0..4.0f64)) {
        let mat = nalgebra::Matrix3::from_row_slice(&a) + nalgebra::Matrix3::identity() * 2.0;
        prop_assume!(mat.determinant().abs() > 0.5);
        let map = |v: &[f64]| -> Vec<f64> {
            let y = mat * nalgebra::Vector3::new(v[0], v[1], v[2]);
            (0..3).map(|i| y[i] + shift[i]).collect()
        };
        let rows: Vec<Vec<f64>> = raw.iter().map(|&(x, y, z)| vec![x, y + 0.3 * x, z - 0.2 * y]).collect();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| map(r)).collect();
        let cfg = MahalanobisConfig { ridge_fraction: 0.0, ridge_floor: 1e-300, ..Default::default() };
        let m0 = scorers::fit_mahalanobis(&BTreeMap::from([(0, rows)]), &cfg).unwrap();
        let m1 = scorers::fit_mahalanobis(&BTreeMap::from([(0, moved)]), &cfg).unwrap();
        let x = [q.0, q.1, q.2];
        let d0 = scorers::score_mahalanobis(&m0, &x).unwrap();
        let d1 = scorers::score_mahalanobis(&m1, &map(&x)).unwrap();
        prop_assert!((d0 - d1).abs() <= 1e-6 * d0.max(1e-9), "{} vs {}", d0, d1);
    }

    #[test]
    fn upsampling_replicates_cells(h in 1usize..5, w in 1usize..5, c in 1usize..4, s in 1usize..4,
                                   vals in prop::collection::vec(-5.0..5.0f32, 64)) {
        let fm = FeatureMap {
            layer: LayerTag::Conv2x,
            height: h,
            width: w,
            channels: c,
            data: (0..h * w * c).map(|i| vals[i % vals.len()]).collect(),
            stride_vs_backbone: s,
        };
        let up = upsample_nearest(&fm, (h * s, w * s)).unwrap();
        let cells = |m: &FeatureMap| -> BTreeSet<Vec<u32>> {
            m.data.chunks(m.channels).map(|v| v.iter().map(|x| x.to_bits()).collect()).collect()
        };
        prop_assert_eq!(cells(&fm), cells(&up));
        let sum = |m: &FeatureMap| m.data.iter().map(|&x| x as f64).sum::<f64>();
        prop_assert!((sum(&up) - (s * s) as f64 * sum(&fm)).abs() < 1e-6 * (1.0 + sum(&fm).abs() * (s * s) as f64));
    }

    #[test]
    fn anchors_invariant_under_gt_permutation(objs in prop::collection::vec((0.0..60.0f64, -20.0..20.0f64, 0usize..3, -3.0..3.0f64), 1..6),
                                             seed_ in any::<u64>()) {
        let cfg = DetectorConfig::default();
        let classes = cfg.class_names();
        let gt: Vec<LabeledObject> = objs.iter().map(|&(x, y, c, yaw)| {
            let t = &cfg.classes[c];
            LabeledObject::in_distribution(Box3D::new([x, y, t.z_center], t.size, yaw), t.name.clone())
        }).collect();
        let mut perm: Vec<usize> = (0..gt.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut seed::rng(seed_));
        let shuffled: Vec<LabeledObject> = perm.iter().map(|&i| gt[i].clone()).collect();
        let grid = cfg.anchor_grid();
        let key = |a: &ood_core::featx::PositiveAnchor, map: &dyn Fn(usize) -> usize| (map(a.object_index), a.row, a.col, a.anchor, a.class_index);
        let a: BTreeSet<_> = assign_positive_anchors(&gt, &classes, &grid).iter().map(|p| key(p, &|i| i)).collect();
        let b: BTreeSet<_> = assign_positive_anchors(&shuffled, &classes, &grid).iter().map(|p| key(p, &|k| perm[k])).collect();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn stub_detections_are_pure_and_valid(seed_ in any::<u64>()) {
        let cfg = DetectorConfig { rng_seed: seed_, ..Default::default() };
        let ds = make_dataset(&SynthConfig { frames: 2, seed: seed_, ..Default::default() }, &cfg);
        let det = StubDetector::new(cfg.clone()).unwrap();
        for f in &ds.frames {
            let a = det.detect(&f.cloud).unwrap();
            let b = det.detect(&f.cloud).unwrap();
            prop_assert_eq!(&a.detections, &b.detections);
            prop_assert_eq!(&a.mc_softmax_samples, &b.mc_softmax_samples);
            for d in &a.detections {
                prop_assert!(d.confidence >= cfg.score_threshold);
                prop_assert!((d.class_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
            // duplicating the points of a detected cluster keeps the detection
            for d in &a.detections {
                let inside: Vec<Point> = f.cloud.points.iter().filter(|p| d.bbox.padded(0.2).contains(p)).copied().collect();
                let mut pts = f.cloud.points.clone();
                pts.extend(inside);
                let more = det.detect(&PointCloud::new(f.id(), pts)).unwrap();
                prop_assert!(more.detections.iter().any(|e| ood_core::geometry::bev_iou(&e.bbox, &d.bbox) > 0.0));
            }
        }
    }

    #[test]
    fn injection_stats_are_conserved(seed_ in any::<u64>(), gamma in 1usize..20, zeta in 1usize..6) {
        let det_cfg = DetectorConfig::default();
        let synth = SynthConfig { frames: 8, seed: seed_, ..Default::default() };
        let ds = make_dataset(&synth, &det_cfg);
        let db = make_ood_objects(&synth, &det_cfg.fov);
        let det = StubDetector::new(det_cfg).unwrap();
        let cfg = InjectConfig { rng_seed: seed_, gamma_max: gamma, zeta_max: zeta, ..Default::default() };
        let out = inject::generate_ood_dataset(&ds, &db, &det, &cfg).unwrap();
        for st in out.stats.per_class.values() {
            prop_assert!(st.inserted_count <= zeta);
            prop_assert!(st.attempted_frames * gamma >= st.injection_failure_trials + st.detection_failure_trials + st.accepted_trials);
            prop_assert!(st.injection_failures() >= 0.0 && st.detection_failures() >= 0.0);
        }
    }
}

fn gaussian(n: usize, center: [f64; 2], seed_: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, Normal};
    let mut r = seed::rng(seed_);
    let g = Normal::new(0.0, 0.5).unwrap();
    (0..n).map(|_| vec![center[0] + g.sample(&mut r), center[1] + g.sample(&mut r)]).collect()
}

#[test]
fn every_scorer_points_larger_at_ood() {
    let train = gaussian(400, [0.0, 0.0], 1);
    let id = gaussian(200, [0.0, 0.0], 2);
    let ood = gaussian(200, [6.0, 6.0], 3);
    let labels: Vec<bool> = (0..400).map(|i| i >= 200).collect();
    let auc = |f: &dyn Fn(&[f64]) -> f64| {
        let s: Vec<f64> = id.iter().chain(&ood).map(|x| f(x)).collect();
        metrics::auroc(&ScoredSet::from_pairs(&s, &labels).unwrap()).unwrap()
    };
    let groups = BTreeMap::from([(0, train.clone())]);
    let maha = scorers::fit_mahalanobis(&groups, &MahalanobisConfig::default()).unwrap();
    assert!(auc(&|x| scorers::score_mahalanobis(&maha, x).unwrap()) > 0.5);
    let svm = scorers::fit_ocsvm(&groups, &OcSvmConfig { gamma: 0.5, ..Default::default() }).unwrap();
    assert!(auc(&|x| scorers::score_ocsvm(&svm, x).unwrap()) > 0.5);
    let fresh = FlowModel::new(2, FlowConfig { layers: 2, hidden: 8, alpha_init: 2.0 }, 4).unwrap();
    let (fl, _) = flow::fit(&fresh, &train, &TrainConfig { steps: 200, ..Default::default() }).unwrap();
    assert!(auc(&|x| scorers::score_flow(&fl, x).unwrap()) > 0.5);

    // output-space scores: confident ID detections against flat OOD ones
    let b = Box3D::new([10.0, 0.0, -1.0], [3.9, 1.6, 1.56], 0.0);
    let peaked = Detection::from_probs(b, vec![0.9, 0.05, 0.03, 0.02]);
    let flat = Detection::from_probs(b, vec![0.3, 0.25, 0.25, 0.2]);
    assert!(scorers::score_max_softmax(&flat) > scorers::score_max_softmax(&peaked));
    let steady = vec![vec![0.9, 0.05, 0.05]; 5];
    let jumpy = vec![vec![0.9, 0.05, 0.05], vec![0.05, 0.9, 0.05], vec![0.05, 0.05, 0.9]];
    let (u_id, u_ood) = (scorers::score_uncertainty(&steady), scorers::score_uncertainty(&jumpy));
    assert!(u_ood.predictive_entropy > u_id.predictive_entropy);
    assert!(u_ood.mutual_information > u_id.mutual_information);
    let aleatoric_flat = scorers::score_uncertainty(&[vec![0.34, 0.33, 0.33]]);
    assert!(aleatoric_flat.aleatoric_entropy > u_id.aleatoric_entropy);
}

#[test]
fn fits_are_bit_reproducible() {
    let train = gaussian(300, [1.0, -1.0], 5);
    let groups = BTreeMap::from([(0, train.clone()), (1, gaussian(50, [3.0, 3.0], 6))]);
    let mc = MahalanobisConfig::default();
    assert_eq!(scorers::fit_mahalanobis(&groups, &mc).unwrap(), scorers::fit_mahalanobis(&groups, &mc).unwrap());
    let oc = OcSvmConfig { seed: 9, ..Default::default() };
    assert_eq!(scorers::fit_ocsvm(&groups, &oc).unwrap(), scorers::fit_ocsvm(&groups, &oc).unwrap());
    let fresh = FlowModel::new(2, FlowConfig { layers: 2, hidden: 8, alpha_init: 2.0 }, 4).unwrap();
    let tc = TrainConfig { steps: 100, seed: 3, ..Default::default() };
    let (a, ta) = flow::fit(&fresh, &train, &tc).unwrap();
    let (b, tb) = flow::fit(&fresh, &train, &tc).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ta, tb);
}

#[test]
fn derived_seeds_do_not_collide() {
    let mut seen = BTreeSet::new();
    for master in 0..8u64 {
        for r in 0..8u64 {
            let rep = seed::derive(master, r);
            for stage in [seed::stage::INJECT, seed::stage::DETECT, seed::stage::FIT, seed::stage::EVAL] {
                for class in 0..6u64 {
                    assert!(seen.insert(seed::derive_path(rep, &[stage, class])));
                }
            }
        }
    }
}
