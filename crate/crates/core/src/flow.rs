//! RealNVP density model with affine coupling layers.
//!
//! Each layer keeps the coordinates selected by its mask and updates the rest
//! as `y = x * exp(s) + t`, where `s` and `t` are two-hidden-layer tanh
//! perceptrons of the kept coordinates and `s = alpha * tanh(raw)`. Masks
//! alternate between the first `ceil(d/2)` coordinates and the rest.
//! Gradients of the negative log-likelihood are derived by hand.
//!
//! Inputs are standardized per dimension before the first layer; the scale
//! enters the log-determinant so densities are defined on raw features.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("non-finite activation")]
    NonFiniteActivation,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("no training samples")]
    EmptySamples,
    #[error("expected dimension {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
    #[error("corrupt model bytes: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of coupling layers; must be even.
    pub layers: usize,
    pub hidden: usize,
    pub alpha_init: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 128,
            alpha_init: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            steps: 2320,
            lr: 1e-3,
            seed: 0,
        }
    }
}

const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub d: usize,
    pub hidden: usize,
    /// `masks[k][j]` is true when layer `k` keeps coordinate `j` fixed.
    pub masks: Vec<Vec<bool>>,
    /// All coupling parameters, layer by layer (see [`FlowModel::layer_size`]).
    pub params: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Offsets inside one perceptron's parameter block.
#[derive(Clone, Copy)]
struct NetLayout {
    d: usize,
    h: usize,
}

impl NetLayout {
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.h * self.d
    }
    fn w2(&self) -> usize {
        self.b1() + self.h
    }
    fn b2(&self) -> usize {
        self.w2() + self.h * self.h
    }
    fn w3(&self) -> usize {
        self.b2() + self.h
    }
    fn b3(&self) -> usize {
        self.w3() + self.d * self.h
    }
    fn size(&self) -> usize {
        self.b3() + self.d
    }
}

#[derive(Clone, Default)]
struct NetCache {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

fn net_forward(p: &[f64], l: NetLayout, xm: &[f64], c: &mut NetCache) {
    let (d, h) = (l.d, l.h);
    c.h1.resize(h, 0.0);
    c.h2.resize(h, 0.0);
    c.out.resize(d, 0.0);
    for i in 0..h {
        let row = &p[l.w1() + i * d..l.w1() + (i + 1) * d];
        let a: f64 = p[l.b1() + i] + row.iter().zip(xm).map(|(w, x)| w * x).sum::<f64>();
        c.h1[i] = a.tanh();
    }
    for i in 0..h {
        let row = &p[l.w2() + i * h..l.w2() + (i + 1) * h];
        let a: f64 = p[l.b2() + i] + row.iter().zip(&c.h1).map(|(w, x)| w * x).sum::<f64>();
        c.h2[i] = a.tanh();
    }
    for i in 0..d {
        let row = &p[l.w3() + i * h..l.w3() + (i + 1) * h];
        c.out[i] = p[l.b3() + i] + row.iter().zip(&c.h2).map(|(w, x)| w * x).sum::<f64>();
    }
}

/// Accumulates parameter gradients into `g` and returns dL/d(input).
fn net_backward(p: &[f64], g: &mut [f64], l: NetLayout, xm: &[f64], c: &NetCache, dout: &[f64]) -> Vec<f64> {
    let (d, h) = (l.d, l.h);
    let mut dh2 = vec![0.0; h];
    for i in 0..d {
        let go = dout[i];
        if go == 0.0 {
            continue;
        }
        g[l.b3() + i] += go;
        let base = l.w3() + i * h;
        for k in 0..h {
            g[base + k] += go * c.h2[k];
            dh2[k] += go * p[base + k];
        }
    }
    let da2: Vec<f64> = (0..h).map(|k| dh2[k] * (1.0 - c.h2[k] * c.h2[k])).collect();
    let mut dh1 = vec![0.0; h];
    for i in 0..h {
        let go = da2[i];
        g[l.b2() + i] += go;
        let base = l.w2() + i * h;
        for k in 0..h {
            g[base + k] += go * c.h1[k];
            dh1[k] += go * p[base + k];
        }
    }
    let da1: Vec<f64> = (0..h).map(|k| dh1[k] * (1.0 - c.h1[k] * c.h1[k])).collect();
    let mut dx = vec![0.0; d];
    for i in 0..h {
        let go = da1[i];
        g[l.b1() + i] += go;
        let base = l.w1() + i * d;
        for k in 0..d {
            g[base + k] += go * xm[k];
            dx[k] += go * p[base + k];
        }
    }
    dx
}

#[derive(Clone, Default)]
struct LayerCache {
    x: Vec<f64>,
    xm: Vec<f64>,
    tanh_raw: Vec<f64>,
    s: Vec<f64>,
    s_net: NetCache,
    t_net: NetCache,
}

impl FlowModel {
    /// Builds an identity-initialized flow: hidden weights Xavier-uniform,
    /// output layers zero.
    pub fn new(d: usize, cfg: FlowConfig, seed: u64) -> Result<Self> {
        if d < 2 {
            return Err(FlowError::InvalidConfig("dimension must be at least 2".into()));
        }
        if cfg.layers == 0 || cfg.layers % 2 != 0 {
            return Err(FlowError::InvalidConfig("layer count must be even and positive".into()));
        }
        if cfg.hidden == 0 || !cfg.alpha_init.is_finite() {
            return Err(FlowError::InvalidConfig("hidden width must be positive".into()));
        }
        let half = d.div_ceil(2);
        let masks = (0..cfg.layers)
            .map(|k| (0..d).map(|j| (j < half) == (k % 2 == 0)).collect())
            .collect();
        let mut m = Self {
            d,
            hidden: cfg.hidden,
            masks,
            params: Vec::new(),
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        };
        m.params = vec![0.0; m.layer_size() * cfg.layers];
        let mut rng = seed::rng(seed);
        let net = m.net_layout();
        let (h, dd) = (cfg.hidden, d);
        for k in 0..cfg.layers {
            for which in 0..2 {
                let base = k * m.layer_size() + which * net.size();
                let a1 = (6.0 / (dd + h) as f64).sqrt();
                for v in &mut m.params[base + net.w1()..base + net.b1()] {
                    *v = rng.random_range(-a1..a1);
                }
                let a2 = (6.0 / (2 * h) as f64).sqrt();
                for v in &mut m.params[base + net.w2()..base + net.b2()] {
                    *v = rng.random_range(-a2..a2);
                }
            }
            let alpha = k * m.layer_size() + 2 * net.size();
            m.params[alpha] = cfg.alpha_init;
        }
        Ok(m)
    }

    pub fn num_layers(&self) -> usize {
        self.masks.len()
    }

    fn net_layout(&self) -> NetLayout {
        NetLayout { d: self.d, h: self.hidden }
    }

    /// Parameters per coupling layer: scale net, translate net, then alpha.
    pub fn layer_size(&self) -> usize {
        2 * self.net_layout().size() + 1
    }

    fn layer_params(&self, k: usize) -> (&[f64], &[f64], f64) {
        let n = self.net_layout().size();
        let base = k * self.layer_size();
        (
            &self.params[base..base + n],
            &self.params[base + n..base + 2 * n],
            self.params[base + 2 * n],
        )
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.layer_params(k).2
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(FlowError::DimMismatch {
                expected: self.d,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Input standardization's contribution to the log-determinant.
    fn standardization_log_det(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn coupling(&self, k: usize, x: &[f64], cache: &mut LayerCache) -> (Vec<f64>, f64) {
        let (sp, tp, alpha) = self.layer_params(k);
        let l = self.net_layout();
        let mask = &self.masks[k];
        cache.x = x.to_vec();
        cache.xm = x.iter().zip(mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect();
        net_forward(sp, l, &cache.xm, &mut cache.s_net);
        net_forward(tp, l, &cache.xm, &mut cache.t_net);
        cache.tanh_raw = cache.s_net.out.iter().map(|r| r.tanh()).collect();
        cache.s = cache.tanh_raw.iter().map(|t| alpha * t).collect();
        let mut y = x.to_vec();
        let mut ld = 0.0;
        for j in 0..self.d {
            if !mask[j] {
                y[j] = x[j] * cache.s[j].exp() + cache.t_net.out[j];
                ld += cache.s[j];
            }
        }
        (y, ld)
    }

    fn forward_cached(&self, x: &[f64], caches: &mut Vec<LayerCache>) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let mut u: Vec<f64> = (0..self.d).map(|j| (x[j] - self.shift[j]) / self.scale[j]).collect();
        let mut log_det = self.standardization_log_det();
        caches.resize_with(self.num_layers(), LayerCache::default);
        for (k, cache) in caches.iter_mut().enumerate() {
            let (y, ld) = self.coupling(k, &u, cache);
            u = y;
            log_det += ld;
        }
        if u.iter().any(|v| !v.is_finite()) || !log_det.is_finite() {
            return Err(FlowError::NonFiniteActivation);
        }
        Ok((u, log_det))
    }

    /// Maps data to latent space; returns `(z, log|det dz/dx|)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.forward_cached(x, &mut Vec::new())
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let l = self.net_layout();
        let mut y = z.to_vec();
        let mut c = NetCache::default();
        let mut ct = NetCache::default();
        for k in (0..self.num_layers()).rev() {
            let (sp, tp, alpha) = self.layer_params(k);
            let mask = &self.masks[k];
            let ym: Vec<f64> = y.iter().zip(mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect();
            net_forward(sp, l, &ym, &mut c);
            net_forward(tp, l, &ym, &mut ct);
            for j in 0..self.d {
                if !mask[j] {
                    let s = alpha * c.out[j].tanh();
                    y[j] = (y[j] - ct.out[j]) * (-s).exp();
                }
            }
        }
        let x: Vec<f64> = (0..self.d).map(|j| y[j] * self.scale[j] + self.shift[j]).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteActivation);
        }
        Ok(x)
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let (z, ld) = self.forward(x)?;
        Ok(std_normal_log_density(&z) + ld)
    }

    /// Mean negative log-likelihood over `data`.
    pub fn mean_nll(&self, data: &[Vec<f64>]) -> Result<f64> {
        if data.is_empty() {
            return Err(FlowError::EmptySamples);
        }
        let mut total = 0.0;
        for x in data {
            total -= self.log_prob(x)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Mean negative log-likelihood of `batch` and its gradient with respect
    /// to [`FlowModel::params`].
    pub fn grad_nll(&self, batch: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(FlowError::EmptySamples);
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let mut caches = Vec::new();
        let l = self.net_layout();
        let ns = l.size();
        for x in batch {
            let (z, ld) = self.forward_cached(x, &mut caches)?;
            loss += -std_normal_log_density(&z) - ld;
            // dL/dz for L = |z|^2/2 - log_det + const.
            let mut g = z;
            for k in (0..self.num_layers()).rev() {
                let c = &caches[k];
                let (sp, tp, alpha) = self.layer_params(k);
                let mask = &self.masks[k];
                let base = k * self.layer_size();
                let mut d_raw = vec![0.0; self.d];
                let mut d_t = vec![0.0; self.d];
                let mut d_alpha = 0.0;
                let mut gx = vec![0.0; self.d];
                for j in 0..self.d {
                    if mask[j] {
                        gx[j] = g[j];
                    } else {
                        let es = c.s[j].exp();
                        let ds = g[j] * c.x[j] * es - 1.0;
                        d_alpha += ds * c.tanh_raw[j];
                        d_raw[j] = ds * alpha * (1.0 - c.tanh_raw[j] * c.tanh_raw[j]);
                        d_t[j] = g[j];
                        gx[j] = g[j] * es;
                    }
                }
                grad[base + 2 * ns] += d_alpha;
                let (gs, rest) = grad[base..base + 2 * ns].split_at_mut(ns);
                let dxs = net_backward(sp, gs, l, &c.xm, &c.s_net, &d_raw);
                let dxt = net_backward(tp, rest, l, &c.xm, &c.t_net, &d_t);
                for j in 0..self.d {
                    if mask[j] {
                        gx[j] += dxs[j] + dxt[j];
                    }
                }
                g = gx;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        if grad.iter().any(|v| !v.is_finite()) || !loss.is_finite() {
            return Err(FlowError::NonFiniteGradient);
        }
        Ok((loss / n, grad))
    }

    /// Sets the input standardization from `data`.
    pub fn fit_standardization(&mut self, data: &[Vec<f64>]) {
        let n = data.len() as f64;
        for j in 0..self.d {
            let mean = data.iter().map(|x| x[j]).sum::<f64>() / n;
            let var = data.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
            self.shift[j] = mean;
            self.scale[j] = var.sqrt().max(STD_FLOOR);
        }
    }
}

pub fn std_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// Per-step training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub nll: Vec<f64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,nll\n");
        for (i, v) in self.nll.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:e}");
        }
        s
    }

    /// Mean of a window at the start and at the end of the trace.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.nll.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.nll[..w]), mean(&self.nll[self.nll.len() - w..])))
    }
}

/// Adam with the usual defaults.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Trains `model` on `samples`: fits the input standardization, then runs
/// `steps` Adam updates over batches drawn from reshuffled passes.
pub fn fit(model: &FlowModel, samples: &[Vec<f64>], cfg: &TrainConfig) -> Result<(FlowModel, LossTrace)> {
    if samples.is_empty() {
        return Err(FlowError::EmptySamples);
    }
    for s in samples {
        model.check_dim(s)?;
    }
    let mut m = model.clone();
    let mut trace = LossTrace::default();
    if cfg.steps == 0 {
        return Ok((m, trace));
    }
    if cfg.batch == 0 {
        return Err(FlowError::InvalidConfig("batch must be positive".into()));
    }
    m.fit_standardization(samples);
    let mut rng = seed::rng(cfg.seed);
    let mut adam = Adam::new(m.params.len(), cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grad) = m.grad_nll(&batch)?;
        trace.nll.push(loss);
        adam.step(&mut m.params, &grad);
    }
    Ok((m, trace))
}

const MAGIC: &[u8; 4] = b"RNVP";
const VERSION: u32 = 1;

impl FlowModel {
    /// Header `RNVP`, version, d, K, width, then shift, scale and parameters,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(24 + 8 * (2 * self.d + self.params.len()));
        b.extend_from_slice(MAGIC);
        for v in [VERSION, self.d as u32, self.num_layers() as u32, self.hidden as u32] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.shift.iter().chain(&self.scale).chain(&self.params) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| FlowError::Corrupt(m.to_string());
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        if u32_at(4) != VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (d, k, h) = (u32_at(8), u32_at(12), u32_at(16));
        let n = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let mut m = FlowModel::new(
            d,
            FlowConfig {
                layers: k,
                hidden: h,
                alpha_init: 0.0,
            },
            0,
        )
        .map_err(|e| FlowError::Corrupt(e.to_string()))?;
        if n != m.params.len() || bytes.len() != 28 + 8 * (2 * d + n) {
            return Err(bad("length does not match header"));
        }
        let vals: Vec<f64> = bytes[28..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        m.shift = vals[..d].to_vec();
        m.scale = vals[d..2 * d].to_vec();
        m.params = vals[2 * d..].to_vec();
        if m.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(bad("non-positive scale"));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d: usize, layers: usize, hidden: usize, seed: u64) -> FlowModel {
        let mut m = FlowModel::new(d, FlowConfig { layers, hidden, alpha_init: 1.5 }, seed).unwrap();
        let mut rng = seed::rng(seed ^ 0xff);
        for v in &mut m.params {
            *v += rng.random_range(-0.5..0.5);
        }
        m
    }

    #[test]
    fn zero_params_are_identity() {
        let mut m = FlowModel::new(3, FlowConfig::default(), 1).unwrap();
        m.params.iter_mut().for_each(|v| *v = 0.0);
        let x = [0.3, -1.2, 2.0];
        let (z, ld) = m.forward(&x).unwrap();
        assert_eq!(z, x);
        assert_eq!(ld, 0.0);
        assert_eq!(m.inverse(&x).unwrap(), x);
    }

    #[test]
    fn fresh_model_is_identity_and_normal() {
        let m = FlowModel::new(2, FlowConfig::default(), 1).unwrap();
        assert!((m.log_prob(&[0.0, 0.0]).unwrap() + (2.0 * PI).ln()).abs() < 1e-15);
        let x = [1.5, -0.5];
        let want = -(2.0 * PI).ln() - 0.5 * (1.5f64 * 1.5 + 0.25);
        assert!((m.log_prob(&x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn constant_scale_log_det() {
        // One layer pair, scale net output bias fixed so s = c on the free half.
        let mut m = FlowModel::new(4, FlowConfig { layers: 2, hidden: 3, alpha_init: 1.0 }, 2).unwrap();
        let l = m.net_layout();
        let raw = 0.4f64;
        for j in 0..4 {
            m.params[l.b3() + j] = raw;
        }
        let second = m.layer_size();
        m.params[second..].iter_mut().for_each(|v| *v = 0.0);
        let (_, ld) = m.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((ld - 2.0 * raw.tanh()).abs() < 1e-15);
    }

    #[test]
    fn round_trip() {
        let m = small(5, 4, 6, 3);
        let x = [0.5, -1.0, 2.0, 0.0, 3.3];
        let back = m.inverse(&m.forward(&x).unwrap().0).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = small(3, 2, 3, 4);
        let batch = vec![vec![0.3, -0.7, 1.1], vec![-1.0, 0.2, 0.5]];
        let (_, g) = m.grad_nll(&batch).unwrap();
        let h = 1e-5;
        for i in 0..m.params.len() {
            let mut p = m.clone();
            p.params[i] += h;
            let up = p.mean_nll(&batch).unwrap();
            p.params[i] -= 2.0 * h;
            let dn = p.mean_nll(&batch).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-7, "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn symmetric_batch_cancels_translate_bias() {
        let mut m = FlowModel::new(2, FlowConfig { layers: 2, hidden: 4, alpha_init: 2.0 }, 5).unwrap();
        m.params.iter_mut().for_each(|v| *v = 0.0);
        let (_, g) = m.grad_nll(&[vec![0.7, -1.3], vec![-0.7, 1.3]]).unwrap();
        let l = m.net_layout();
        let t_b3 = l.size() + l.b3();
        for k in 0..2 {
            for j in 0..2 {
                assert_eq!(g[k * m.layer_size() + t_b3 + j], 0.0);
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let m = small(2, 2, 4, 6);
        let a = vec![0.5, 0.1];
        let b = vec![-0.3, 1.4];
        let (_, gab) = m.grad_nll(&[a.clone(), b.clone()]).unwrap();
        let (_, ga) = m.grad_nll(&[a]).unwrap();
        let (_, gb) = m.grad_nll(&[b]).unwrap();
        for i in 0..gab.len() {
            assert!((gab[i] - 0.5 * (ga[i] + gb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_change_nothing() {
        let m = FlowModel::new(2, FlowConfig::default(), 1).unwrap();
        let (m2, t) = fit(&m, &[vec![1.0, 2.0]], &TrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(m, m2);
        assert!(t.nll.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_serializes() {
        let m = FlowModel::new(2, FlowConfig { layers: 2, hidden: 8, alpha_init: 2.0 }, 1).unwrap();
        let mut rng = seed::rng(9);
        let data: Vec<Vec<f64>> = (0..64).map(|_| vec![rng.random::<f64>(), rng.random::<f64>() * 3.0]).collect();
        let cfg = TrainConfig { steps: 30, ..Default::default() };
        let (a, ta) = fit(&m, &data, &cfg).unwrap();
        let (b, tb) = fit(&m, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.nll.len(), 30);
        assert_eq!(FlowModel::from_bytes(&a.to_bytes()).unwrap(), a);
        assert!(FlowModel::from_bytes(&a.to_bytes()[..40]).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(FlowModel::new(1, FlowConfig::default(), 0).is_err());
        assert!(FlowModel::new(3, FlowConfig { layers: 3, ..Default::default() }, 0).is_err());
        let m = FlowModel::new(3, FlowConfig::default(), 0).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(FlowError::DimMismatch { .. })));
    }
}
