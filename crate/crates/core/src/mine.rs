//! Outlier-vehicle mining from box dimensions.
//!
//! Four DBSCAN clusterings run over different views of the box geometry: a
//! 2-D PCA projection of nine shape features, and the `[l, w]`, `[l, h]`,
//! `[w, h]` pairs. A vehicle is an outlier if any clustering marks it as
//! noise or puts it in a small secondary cluster.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::geometry::Box3D;

#[derive(Debug, Error, PartialEq)]
pub enum MineError {
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("need at least {need} rows, got {got}")]
    InsufficientData { need: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, MineError>;

/// `[l, w, h, l/w, l/h, w/h, lw, lh, wh]`.
pub fn geom_features(b: &Box3D) -> [f64; 9] {
    let [l, w, h] = b.size;
    [l, w, h, l / w, l / h, w / h, l * w, l * h, w * h]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `n × ndim` scores.
    pub projection: Vec<Vec<f64>>,
    /// `ndim` unit loading vectors.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the (standardized) covariance, descending, all of them.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
    /// Column scale divided out before projecting (ones when unstandardized).
    pub scale: Vec<f64>,
}

impl Pca {
    /// Share of total variance captured by the kept components.
    pub fn explained_variance_ratio(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return 1.0;
        }
        self.eigenvalues[..self.components.len()].iter().sum::<f64>() / total
    }
}

const VAR_GUARD: f64 = 1e-12;

fn column_stats(data: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() as f64;
    let d = data[0].len();
    let mut mean = vec![0.0; d];
    for r in data {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in data {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let sd = var.iter().map(|v| (v / (n - 1.0)).sqrt()).collect();
    (mean, sd)
}

/// Projects rows onto the top `ndim` eigenvectors of their covariance. With
/// `standardize`, columns are scaled to unit variance first. Each component
/// is signed so its largest-magnitude loading is positive.
pub fn pca_project(data: &[Vec<f64>], ndim: usize, standardize: bool) -> Result<Pca> {
    let n = data.len();
    if n < 3 {
        return Err(MineError::InsufficientData { need: 3, got: n });
    }
    let d = data[0].len();
    if data.iter().any(|r| r.len() != d) || ndim == 0 || ndim > d {
        return Err(MineError::DegenerateData("ragged rows or bad ndim".into()));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MineError::DegenerateData("non-finite entry".into()));
    }
    let (mean, sd) = column_stats(data);
    let scale = if standardize {
        for (j, s) in sd.iter().enumerate() {
            if s * s <= VAR_GUARD * (1.0 + mean[j] * mean[j]) {
                return Err(MineError::DegenerateData(format!("column {j} has zero variance")));
            }
        }
        sd
    } else {
        vec![1.0; d]
    };
    let x = DMatrix::from_fn(n, d, |i, j| (data[i][j] - mean[j]) / scale[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let components: Vec<Vec<f64>> = order[..ndim]
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if big < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    let projection = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| (0..d).map(|j| x[(i, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        projection,
        components,
        eigenvalues,
        mean,
        scale,
    })
}

/// Z-scores each column; constant columns become zero.
pub fn standardize(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if data.len() < 2 {
        return data.to_vec();
    }
    let (mean, sd) = column_stats(data);
    data.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, v)| if sd[j] > 0.0 { (v - mean[j]) / sd[j] } else { 0.0 })
                .collect()
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// DBSCAN with an inclusive radius; a point's neighbourhood includes itself.
/// `None` marks noise. Clusters are numbered in order of their lowest-index
/// core point; a border point joins the first cluster that reaches it.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist(&points[i], &points[j]) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i].is_some() || !core[i] {
            continue;
        }
        labels[i] = Some(next);
        let mut queue = vec![i];
        let mut head = 0;
        while head < queue.len() {
            let q = queue[head];
            head += 1;
            if !core[q] {
                continue;
            }
            for &j in &neighbours[q] {
                if labels[j].is_none() {
                    labels[j] = Some(next);
                    queue.push(j);
                }
            }
        }
        next += 1;
    }
    labels
}

/// Distance from each point to its `k`-th nearest other point.
pub fn k_distances(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..points.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| dist(&points[i], &points[j]))
                .collect();
            d.sort_by(f64::total_cmp);
            d.get(k.saturating_sub(1)).or(d.last()).copied().unwrap_or(0.0)
        })
        .collect()
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineConfig {
    pub min_pts: usize,
    /// Quantile of k-NN distances used as the radius.
    pub eps_quantile: f64,
    /// Secondary clusters smaller than this share of all points are outliers.
    pub small_cluster_fraction: f64,
    pub standardize_pca: bool,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            min_pts: 5,
            eps_quantile: 0.9,
            small_cluster_fraction: 0.05,
            standardize_pca: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub name: &'static str,
    pub eps: f64,
    pub min_pts: usize,
    pub labels: Vec<Option<usize>>,
    pub outliers: Vec<usize>,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MineReport {
    pub outliers: BTreeSet<usize>,
    pub clusterings: Vec<Clustering>,
}

impl MineReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.clusterings {
            let _ = writeln!(
                s,
                "clustering name={} eps={} min_pts={} clusters={} noise={} outliers={}",
                c.name,
                crate::pcio::fmt_sig9(c.eps),
                c.min_pts,
                c.n_clusters(),
                c.n_noise(),
                join(&c.outliers)
            );
        }
        let all: Vec<usize> = self.outliers.iter().copied().collect();
        let _ = writeln!(s, "outliers count={} indices={}", all.len(), join(&all));
        s
    }
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Noise points and members of small non-largest clusters.
pub fn outliers_of(labels: &[Option<usize>], small_fraction: f64) -> Vec<usize> {
    let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for l in labels.iter().flatten() {
        sizes[*l] += 1;
    }
    let largest = (0..k).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)));
    let cutoff = small_fraction * labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| match l {
            None => true,
            Some(c) => Some(*c) != largest && (sizes[*c] as f64) < cutoff,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Clusters standardized `points` with a radius from the k-distance rule.
pub fn cluster_view(name: &'static str, points: &[Vec<f64>], cfg: &MineConfig) -> Clustering {
    let z = standardize(points);
    let eps = quantile(&k_distances(&z, cfg.min_pts), cfg.eps_quantile).max(1e-9);
    let labels = dbscan(&z, eps, cfg.min_pts);
    let outliers = outliers_of(&labels, cfg.small_cluster_fraction);
    Clustering {
        name,
        eps,
        min_pts: cfg.min_pts,
        labels,
        outliers,
    }
}

pub fn union_outliers<'a>(clusterings: impl IntoIterator<Item = &'a Clustering>) -> BTreeSet<usize> {
    clusterings.into_iter().flat_map(|c| c.outliers.iter().copied()).collect()
}

pub const MIN_VEHICLES: usize = 10;

/// Runs the four clusterings over `vehicles` and unions their outliers.
/// Constant feature columns are dropped before PCA; if every box has the
/// same size there is nothing to separate and the result is empty.
pub fn mine_outliers(vehicles: &[Box3D], cfg: &MineConfig) -> Result<MineReport> {
    let n = vehicles.len();
    if n < MIN_VEHICLES {
        return Err(MineError::InsufficientData {
            need: MIN_VEHICLES,
            got: n,
        });
    }
    let feats: Vec<[f64; 9]> = vehicles.iter().map(geom_features).collect();
    if feats.iter().flatten().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(MineError::DegenerateData("box dimensions must be positive".into()));
    }
    let (mean, sd) = column_stats(&feats.iter().map(|f| f.to_vec()).collect::<Vec<_>>());
    let varying: Vec<usize> = (0..9)
        .filter(|&j| sd[j] * sd[j] > VAR_GUARD * (1.0 + mean[j] * mean[j]))
        .collect();
    if varying.is_empty() {
        return Ok(MineReport {
            outliers: BTreeSet::new(),
            clusterings: Vec::new(),
        });
    }
    let reduced: Vec<Vec<f64>> = feats.iter().map(|f| varying.iter().map(|&j| f[j]).collect()).collect();
    let ndim = varying.len().min(2);
    let pca = pca_project(&reduced, ndim, cfg.standardize_pca)?;
    let pair = |a: usize, b: usize| -> Vec<Vec<f64>> { feats.iter().map(|f| vec![f[a], f[b]]).collect() };
    let views: [(&'static str, Vec<Vec<f64>>); 4] = [
        ("pca", pca.projection),
        ("lw", pair(0, 1)),
        ("lh", pair(0, 2)),
        ("wh", pair(1, 2)),
    ];
    let clusterings: Vec<Clustering> = views.iter().map(|(name, pts)| cluster_view(name, pts, cfg)).collect();
    Ok(MineReport {
        outliers: union_outliers(&clusterings),
        clusterings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![vec![1.0, 2.0]; 6];
        assert_eq!(dbscan(&pts, 0.1, 5), vec![Some(0); 6]);
    }

    #[test]
    fn isolated_point_is_noise() {
        assert_eq!(dbscan(&[vec![0.0]], 1.0, 2), vec![None]);
    }

    #[test]
    fn border_point_goes_to_first_cluster() {
        // Two cores at 0 and 2 each with min_pts 3, border at 1 reachable from both.
        let pts: Vec<Vec<f64>> = [-0.5, -0.4, 0.0, 1.0, 2.0, 2.4, 2.5].iter().map(|&x| vec![x]).collect();
        let l = dbscan(&pts, 0.6, 3);
        assert_eq!(l[3], None);
        let l = dbscan(&pts, 1.0, 3);
        assert_eq!(l[3], l[2]);
    }

    #[test]
    fn pca_on_planar_data_explains_everything() {
        let mut rng = seed::rng(1);
        let data: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let mut r = vec![0.0; 9];
                r[1] = rng.random::<f64>() * 4.0 - 2.0;
                r[2] = rng.random::<f64>() - 0.5;
                r
            })
            .collect();
        let p = pca_project(&data, 2, false).unwrap();
        assert!((p.explained_variance_ratio() - 1.0).abs() < 1e-12);
        assert!(matches!(pca_project(&data, 2, true), Err(MineError::DegenerateData(_))));
    }

    #[test]
    fn pca_components_uncorrelated_and_signed() {
        let mut rng = seed::rng(2);
        let data: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..9).map(|j| rng.random::<f64>() * (j + 1) as f64).collect())
            .collect();
        let p = pca_project(&data, 2, true).unwrap();
        let n = p.projection.len() as f64;
        let cov: f64 = p.projection.iter().map(|r| r[0] * r[1]).sum::<f64>() / (n - 1.0);
        assert!(cov.abs() < 1e-9);
        for c in &p.components {
            let big = c.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn identical_vehicles_have_no_outliers() {
        let boxes = vec![Box3D::new([0.0; 3], [4.0, 1.7, 1.5], 0.0); 20];
        assert!(mine_outliers(&boxes, &MineConfig::default()).unwrap().outliers.is_empty());
    }

    #[test]
    fn too_few_vehicles() {
        let boxes = vec![Box3D::new([0.0; 3], [4.0, 1.7, 1.5], 0.0); 5];
        assert!(matches!(
            mine_outliers(&boxes, &MineConfig::default()),
            Err(MineError::InsufficientData { .. })
        ));
    }

    #[test]
    fn small_cluster_rule() {
        let mut labels = vec![Some(0); 90];
        labels.extend(vec![Some(1); 4]);
        labels.extend(vec![Some(2); 6]);
        labels.push(None);
        assert_eq!(outliers_of(&labels, 0.05), (90..94).chain([100]).collect::<Vec<_>>());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[0.0, 10.0], 0.9), 9.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
    }
}
