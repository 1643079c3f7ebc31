//! OOD scores for detections. Every score is oriented so that larger means
//! more likely out of distribution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featx::LayerTag;
use crate::flow::{FlowError, FlowModel};
use crate::geometry::Detection;
use crate::pcio::{self, OodSource, PcioError};
use crate::seed;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("class {class}: need at least {need} samples, got {got}")]
    InsufficientSamples { class: usize, need: usize, got: usize },
    #[error("expected dimension {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no training samples")]
    NoSamples,
    #[error("covariance of class {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("invalid scorer config: {0}")]
    InvalidConfig(String),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Io(#[from] PcioError),
}

pub type Result<T> = std::result::Result<T, ScoreError>;

// ---------------------------------------------------------------------------
// Output-space scores

/// One minus the largest foreground probability.
pub fn score_max_softmax(d: &Detection) -> f64 {
    let m = d.fg_probs().iter().copied().fold(0.0, f64::max);
    (1.0 - m).clamp(0.0, 1.0)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uncertainty {
    pub predictive_entropy: f64,
    pub aleatoric_entropy: f64,
    pub mutual_information: f64,
}

/// Entropy of the mean distribution, mean entropy, and their difference.
pub fn score_uncertainty(samples: &[Vec<f64>]) -> Uncertainty {
    let t = samples.len() as f64;
    let k = samples.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; k];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / t;
        }
    }
    let predictive = entropy(&mean);
    let aleatoric = samples.iter().map(|s| entropy(s)).sum::<f64>() / t;
    Uncertainty {
        predictive_entropy: predictive,
        aleatoric_entropy: aleatoric,
        // non-negative by Jensen; clamp rounding noise
        mutual_information: (predictive - aleatoric).max(0.0),
    }
}

// ---------------------------------------------------------------------------
// Mahalanobis

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MahalanobisConfig {
    pub batch: usize,
    pub epochs: usize,
    /// Ridge as a fraction of the mean eigenvalue.
    pub ridge_fraction: f64,
    /// Smallest ridge, used when the scatter vanishes.
    pub ridge_floor: f64,
}

impl Default for MahalanobisConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            epochs: 5,
            ridge_fraction: 1e-3,
            ridge_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassGaussian {
    pub count: usize,
    pub mean: DVector<f64>,
    /// Regularized covariance.
    pub cov: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub ridge: f64,
}

impl ClassGaussian {
    pub fn new(count: usize, mean: DVector<f64>, cov: DMatrix<f64>, ridge: f64, class: usize) -> Result<Self> {
        let chol = cov.clone().cholesky().ok_or(ScoreError::NotPositiveDefinite(class))?;
        let precision = chol.inverse();
        let precision = (&precision + precision.transpose()) * 0.5;
        Ok(Self {
            count,
            mean,
            cov,
            precision,
            ridge,
        })
    }

    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        (d.transpose() * &self.precision * &d)[(0, 0)].max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisModel {
    pub dim: usize,
    pub classes: BTreeMap<usize, ClassGaussian>,
}

/// Streaming sufficient statistics: count, mean, centered scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: DVector<f64>,
    pub m2: DMatrix<f64>,
}

impl Moments {
    pub fn empty(d: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }

    /// Two-pass statistics of one batch.
    pub fn of_batch(rows: &[&Vec<f64>], d: usize) -> Self {
        let n = rows.len();
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut m2 = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            m2.syger(1.0, &c, &c, 1.0);
        }
        m2.fill_upper_triangle_with_lower_triangle();
        Self { n, mean, m2 }
    }

    /// Pairwise merge of two sets of statistics.
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return other.clone();
        }
        if other.n == 0 {
            return self.clone();
        }
        let n = self.n + other.n;
        let (na, nb, nf) = (self.n as f64, other.n as f64, n as f64);
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &delta * (nb / nf);
        let m2 = &self.m2 + &other.m2 + (&delta * delta.transpose()) * (na * nb / nf);
        Moments { n, mean, m2 }
    }
}

fn check_rows(rows: &[Vec<f64>], d: usize) -> Result<()> {
    for r in rows {
        if r.len() != d {
            return Err(ScoreError::DimMismatch {
                expected: d,
                found: r.len(),
            });
        }
    }
    Ok(())
}

/// Fits one Gaussian per class with batched streaming updates. Statistics
/// restart every epoch, so each epoch reproduces the same estimate.
pub fn fit_mahalanobis(groups: &BTreeMap<usize, Vec<Vec<f64>>>, cfg: &MahalanobisConfig) -> Result<MahalanobisModel> {
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(ScoreError::InvalidConfig("batch and epochs must be positive".into()));
    }
    let d = groups
        .values()
        .find_map(|v| v.first().map(Vec::len))
        .ok_or(ScoreError::NoSamples)?;
    let mut classes = BTreeMap::new();
    for (&c, rows) in groups {
        check_rows(rows, d)?;
        if rows.len() < d + 1 {
            return Err(ScoreError::InsufficientSamples {
                class: c,
                need: d + 1,
                got: rows.len(),
            });
        }
        let mut stats = Moments::empty(d);
        for _ in 0..cfg.epochs {
            stats = Moments::empty(d);
            for chunk in rows.chunks(cfg.batch) {
                let refs: Vec<&Vec<f64>> = chunk.iter().collect();
                stats = stats.merge(&Moments::of_batch(&refs, d));
            }
        }
        let mut cov = &stats.m2 / (stats.n as f64 - 1.0);
        let ridge = (cfg.ridge_fraction * cov.trace() / d as f64).max(cfg.ridge_floor);
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        classes.insert(c, ClassGaussian::new(stats.n, stats.mean, cov, ridge, c)?);
    }
    Ok(MahalanobisModel { dim: d, classes })
}

impl MahalanobisModel {
    /// Smallest squared Mahalanobis distance over classes.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(ScoreError::DimMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let v = DVector::from_column_slice(x);
        Ok(self
            .classes
            .values()
            .map(|g| g.distance(&v))
            .fold(f64::INFINITY, f64::min))
    }
}

pub fn score_mahalanobis(m: &MahalanobisModel, x: &[f64]) -> Result<f64> {
    m.score(x)
}

// ---------------------------------------------------------------------------
// One-class SVM on random Fourier features

/// How per-class margins become one OOD score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcSvmReading {
    /// Negated margin of the best-fitting class.
    NegatedBestMargin,
    /// Negated margin of the worst-fitting class.
    NegatedWorstMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcSvmConfig {
    pub nu: f64,
    pub gamma: f64,
    pub batch: usize,
    pub epochs: usize,
    pub features: usize,
    pub seed: u64,
    pub reading: OcSvmReading,
}

impl Default for OcSvmConfig {
    fn default() -> Self {
        Self {
            nu: 0.01,
            gamma: 2.0,
            batch: 64,
            epochs: 5,
            features: 256,
            seed: 0,
            reading: OcSvmReading::NegatedBestMargin,
        }
    }
}

/// `phi(x) = sqrt(2/D) cos(omega x + b)`, approximating `exp(-gamma |x - y|^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierFeatures {
    pub dim: usize,
    /// `D × dim`, row-major.
    pub omega: Vec<f64>,
    pub phase: Vec<f64>,
}

impl FourierFeatures {
    pub fn new(dim: usize, features: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, (2.0 * gamma).sqrt()).expect("gamma checked positive");
        let omega = (0..features * dim).map(|_| normal.sample(&mut rng)).collect();
        let phase = (0..features)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Self { dim, omega, phase }
    }

    pub fn len(&self) -> usize {
        self.phase.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phase.is_empty()
    }

    pub fn map(&self, x: &[f64]) -> Vec<f64> {
        let norm = (2.0 / self.len() as f64).sqrt();
        (0..self.len())
            .map(|k| {
                let row = &self.omega[k * self.dim..(k + 1) * self.dim];
                let a: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.phase[k];
                norm * a.cos()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcSvmClass {
    pub features: FourierFeatures,
    pub w: Vec<f64>,
    pub rho: f64,
}

impl OcSvmClass {
    /// `<w, phi(x)> - rho`; negative on the outlier side.
    pub fn decision(&self, x: &[f64]) -> f64 {
        let phi = self.features.map(x);
        phi.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() - self.rho
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcSvmModel {
    pub dim: usize,
    pub nu: f64,
    pub gamma: f64,
    pub reading: OcSvmReading,
    pub classes: BTreeMap<usize, OcSvmClass>,
}

pub const OCSVM_MIN_SAMPLES: usize = 10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn profile_rho(phis: &[Vec<f64>], w: &[f64], k: usize) -> f64 {
    let mut s: Vec<f64> = phis.iter().map(|p| dot(p, w)).collect();
    let (_, v, _) = s.select_nth_unstable_by(k - 1, f64::total_cmp);
    *v
}

/// Trains one primal OC-SVM per class on
/// `|w|^2/2 - rho + 1/(nu n) sum max(0, rho - <w, phi(x)>)`.
/// For fixed `w` the best `rho` is the `ceil(nu n)`-th smallest training
/// value of `<w, phi(x)>`, so `rho` is kept at that value and `w` follows
/// minibatch subgradient steps of size `1/(t+1)`, which keeps the warm start
/// in the running average.
pub fn fit_ocsvm(groups: &BTreeMap<usize, Vec<Vec<f64>>>, cfg: &OcSvmConfig) -> Result<OcSvmModel> {
    if !(cfg.nu > 0.0 && cfg.nu <= 1.0) || !(cfg.gamma > 0.0) || cfg.batch == 0 || cfg.features == 0 {
        return Err(ScoreError::InvalidConfig("need nu in (0, 1], gamma > 0, batch and features positive".into()));
    }
    let d = groups
        .values()
        .find_map(|v| v.first().map(Vec::len))
        .ok_or(ScoreError::NoSamples)?;
    let mut classes = BTreeMap::new();
    for (&c, rows) in groups {
        check_rows(rows, d)?;
        if rows.len() < OCSVM_MIN_SAMPLES {
            return Err(ScoreError::InsufficientSamples {
                class: c,
                need: OCSVM_MIN_SAMPLES,
                got: rows.len(),
            });
        }
        let class_seed = seed::derive(cfg.seed, c as u64);
        let ff = FourierFeatures::new(d, cfg.features, cfg.gamma, class_seed);
        let phis: Vec<Vec<f64>> = rows.iter().map(|r| ff.map(r)).collect();
        let mut rng = seed::rng(seed::derive(class_seed, 1));
        let dd = cfg.features;
        let n = rows.len();
        let k = ((cfg.nu * n as f64).ceil() as usize).clamp(1, n);
        // Warm start at the nu = 1 solution, the mean feature vector.
        let mut w = vec![0.0; dd];
        for p in &phis {
            for (a, v) in w.iter_mut().zip(p) {
                *a += v / n as f64;
            }
        }
        let mut rho = profile_rho(&phis, &w, k);
        let mut order: Vec<usize> = (0..n).collect();
        let mut t = 0usize;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch) {
                t += 1;
                let eta = 1.0 / (t + 1) as f64;
                let scale = 1.0 / (cfg.nu * chunk.len() as f64);
                let mut pull = vec![0.0; dd];
                for &i in chunk {
                    if rho - dot(&phis[i], &w) > 0.0 {
                        for (p, v) in pull.iter_mut().zip(&phis[i]) {
                            *p += scale * v;
                        }
                    }
                }
                for (a, p) in w.iter_mut().zip(&pull) {
                    *a -= eta * (*a - p);
                }
                rho = profile_rho(&phis, &w, k);
            }
        }
        classes.insert(c, OcSvmClass { features: ff, w, rho });
    }
    Ok(OcSvmModel {
        dim: d,
        nu: cfg.nu,
        gamma: cfg.gamma,
        reading: cfg.reading,
        classes,
    })
}

impl OcSvmModel {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(ScoreError::DimMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let margins = self.classes.values().map(|c| c.decision(x));
        Ok(match self.reading {
            OcSvmReading::NegatedBestMargin => -margins.fold(f64::NEG_INFINITY, f64::max),
            OcSvmReading::NegatedWorstMargin => -margins.fold(f64::INFINITY, f64::min),
        })
    }
}

pub fn score_ocsvm(m: &OcSvmModel, x: &[f64]) -> Result<f64> {
    m.score(x)
}

/// Negative log-likelihood under the flow.
pub fn score_flow(m: &FlowModel, x: &[f64]) -> Result<f64> {
    Ok(-m.log_prob(x)?)
}

// ---------------------------------------------------------------------------
// Methods and fitted models

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MaxSoftmax,
    PredictiveEntropy,
    AleatoricEntropy,
    MutualInformation,
    Mahalanobis,
    #[serde(rename = "ocsvm")]
    OcSvm,
    Flow,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::MaxSoftmax,
        Method::PredictiveEntropy,
        Method::AleatoricEntropy,
        Method::MutualInformation,
        Method::Mahalanobis,
        Method::OcSvm,
        Method::Flow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::MaxSoftmax => "max_softmax",
            Method::PredictiveEntropy => "predictive_entropy",
            Method::AleatoricEntropy => "aleatoric_entropy",
            Method::MutualInformation => "mutual_information",
            Method::Mahalanobis => "mahalanobis",
            Method::OcSvm => "ocsvm",
            Method::Flow => "flow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.as_str() == s)
    }

    /// Whether the method scores feature vectors rather than detector outputs.
    pub fn needs_features(self) -> bool {
        matches!(self, Method::Mahalanobis | Method::OcSvm | Method::Flow)
    }

    fn code(self) -> u8 {
        Self::ALL.iter().position(|m| *m == self).unwrap() as u8
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::parse(s).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
            format!("unknown method '{s}' (expected one of {})", known.join(", "))
        })
    }
}

/// Scores a detection with an output-space method.
pub fn score_output(method: Method, det: &Detection, mc: Option<&[Vec<f64>]>) -> Option<f64> {
    match method {
        Method::MaxSoftmax => Some(score_max_softmax(det)),
        Method::PredictiveEntropy | Method::AleatoricEntropy | Method::MutualInformation => {
            let u = score_uncertainty(mc?);
            Some(match method {
                Method::PredictiveEntropy => u.predictive_entropy,
                Method::AleatoricEntropy => u.aleatoric_entropy,
                _ => u.mutual_information,
            })
        }
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FittedModel {
    Mahalanobis(MahalanobisModel),
    OcSvm(OcSvmModel),
    Flow(FlowModel),
}

impl FittedModel {
    pub fn method(&self) -> Method {
        match self {
            FittedModel::Mahalanobis(_) => Method::Mahalanobis,
            FittedModel::OcSvm(_) => Method::OcSvm,
            FittedModel::Flow(_) => Method::Flow,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FittedModel::Mahalanobis(m) => m.dim,
            FittedModel::OcSvm(m) => m.dim,
            FittedModel::Flow(m) => m.d,
        }
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        match self {
            FittedModel::Mahalanobis(m) => m.score(x),
            FittedModel::OcSvm(m) => m.score(x),
            FittedModel::Flow(m) => score_flow(m, x),
        }
    }
}

// ---------------------------------------------------------------------------
// Model files: "OODM", u32 version, u8 method, u8 layer, u32 d, payload.

const MODEL_MAGIC: &[u8; 4] = b"OODM";
const MODEL_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64s<'a>(&mut self, v: impl IntoIterator<Item = &'a f64>) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return Err(ScoreError::Corrupt(format!("truncated at byte {}", self.at)));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode_model(model: &FittedModel, layer: LayerTag) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION as usize);
    w.u8(model.method().code());
    w.u8(layer.code());
    w.u32(model.dim());
    match model {
        FittedModel::Mahalanobis(m) => {
            w.u32(m.classes.len());
            for (c, g) in &m.classes {
                w.u32(*c);
                w.u64(g.count);
                w.f64s([&g.ridge]);
                w.f64s(g.mean.iter());
                w.f64s(g.cov.iter());
            }
        }
        FittedModel::OcSvm(m) => {
            w.f64s([&m.nu, &m.gamma]);
            w.u8(u8::from(m.reading == OcSvmReading::NegatedWorstMargin));
            w.u32(m.classes.len());
            for (c, k) in &m.classes {
                w.u32(*c);
                w.u32(k.features.len());
                w.f64s(&k.features.omega);
                w.f64s(&k.features.phase);
                w.f64s(&k.w);
                w.f64s([&k.rho]);
            }
        }
        FittedModel::Flow(f) => {
            let b = f.to_bytes();
            w.u64(b.len());
            w.0.extend_from_slice(&b);
        }
    }
    w.0
}

pub fn decode_model(bytes: &[u8]) -> Result<(FittedModel, LayerTag)> {
    let mut r = Reader { b: bytes, at: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(ScoreError::Corrupt("bad magic".into()));
    }
    if r.u32()? != MODEL_VERSION as usize {
        return Err(ScoreError::Corrupt("unsupported version".into()));
    }
    let method = *Method::ALL
        .get(r.u8()? as usize)
        .ok_or_else(|| ScoreError::Corrupt("unknown method".into()))?;
    let layer = LayerTag::from_code(r.u8()?).ok_or_else(|| ScoreError::Corrupt("unknown layer".into()))?;
    let d = r.u32()?;
    let model = match method {
        Method::Mahalanobis => {
            let k = r.u32()?;
            let mut classes = BTreeMap::new();
            for _ in 0..k {
                let c = r.u32()?;
                let count = r.u64()?;
                let ridge = r.f64()?;
                let mean = DVector::from_vec(r.f64s(d)?);
                let cov = DMatrix::from_vec(d, d, r.f64s(d * d)?);
                classes.insert(c, ClassGaussian::new(count, mean, cov, ridge, c)?);
            }
            FittedModel::Mahalanobis(MahalanobisModel { dim: d, classes })
        }
        Method::OcSvm => {
            let nu = r.f64()?;
            let gamma = r.f64()?;
            let reading = if r.u8()? == 1 {
                OcSvmReading::NegatedWorstMargin
            } else {
                OcSvmReading::NegatedBestMargin
            };
            let k = r.u32()?;
            let mut classes = BTreeMap::new();
            for _ in 0..k {
                let c = r.u32()?;
                let nf = r.u32()?;
                let omega = r.f64s(nf * d)?;
                let phase = r.f64s(nf)?;
                let w = r.f64s(nf)?;
                let rho = r.f64()?;
                classes.insert(
                    c,
                    OcSvmClass {
                        features: FourierFeatures { dim: d, omega, phase },
                        w,
                        rho,
                    },
                );
            }
            FittedModel::OcSvm(OcSvmModel {
                dim: d,
                nu,
                gamma,
                reading,
                classes,
            })
        }
        Method::Flow => {
            let n = r.u64()?;
            FittedModel::Flow(FlowModel::from_bytes(r.take(n)?)?)
        }
        other => return Err(ScoreError::Corrupt(format!("{other} has no fitted state"))),
    };
    if r.at != bytes.len() {
        return Err(ScoreError::Corrupt("trailing bytes".into()));
    }
    Ok((model, layer))
}

pub fn write_model(model: &FittedModel, layer: LayerTag, path: &Path) -> Result<()> {
    Ok(pcio::write_bytes(path, &encode_model(model, layer))?)
}

pub fn read_model(path: &Path) -> Result<(FittedModel, LayerTag)> {
    let bytes = std::fs::read(path).map_err(|e| PcioError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_model(&bytes)
}

// ---------------------------------------------------------------------------
// Score tables

/// One scored detection.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub frame_id: String,
    pub detection: usize,
    pub class_label: usize,
    pub method: Method,
    /// Layer name, or `output` for output-space methods.
    pub layer: String,
    pub score: f64,
    pub is_ood: bool,
    /// Origin of the matched OOD object, if any.
    pub source: Option<OodSource>,
}

pub const SCORE_HEADER: &str = "frame_id,detection,class,method,layer,score,is_ood,source";

pub fn format_scores(rows: &[ScoreRow]) -> String {
    let mut s = String::from(SCORE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{},{}",
            r.frame_id,
            r.detection,
            r.class_label,
            r.method,
            r.layer,
            r.score,
            u8::from(r.is_ood),
            r.source.map_or("id", OodSource::as_str)
        );
    }
    s
}

pub fn parse_scores(text: &str, path: &Path) -> std::result::Result<Vec<ScoreRow>, PcioError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("frame_id")) {
            continue;
        }
        let err = |msg: String| PcioError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 && f.len() != 8 {
            return Err(err(format!("expected 7 or 8 fields, found {}", f.len())));
        }
        let score: f64 = f[5].parse().map_err(|_| err(format!("bad score '{}'", f[5])))?;
        if !score.is_finite() {
            return Err(err("non-finite score".into()));
        }
        let source = match f.get(7).copied() {
            None | Some("id") | Some("") => None,
            Some(s) => Some(OodSource::parse(s).ok_or_else(|| err(format!("bad source '{s}'")))?),
        };
        out.push(ScoreRow {
            frame_id: f[0].to_string(),
            detection: f[1].parse().map_err(|_| err("bad detection index".into()))?,
            class_label: f[2].parse().map_err(|_| err("bad class".into()))?,
            method: Method::parse(f[3]).ok_or_else(|| err(format!("unknown method '{}'", f[3])))?,
            layer: f[4].to_string(),
            score,
            is_ood: match f[6] {
                "0" => false,
                "1" => true,
                o => return Err(err(format!("bad is_ood '{o}'"))),
            },
            source,
        });
    }
    Ok(out)
}

pub fn write_scores(rows: &[ScoreRow], path: &Path) -> std::result::Result<(), PcioError> {
    pcio::write_text(path, &format_scores(rows))
}

pub fn read_scores(path: &Path) -> std::result::Result<Vec<ScoreRow>, PcioError> {
    parse_scores(&pcio::read_text(path)?, path)
}
