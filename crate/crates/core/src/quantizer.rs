//! Nearest-code quantization of patch features with a codebook maintained by
//! exponential moving averages of its assigned features.
//!
//! The argmin is not differentiated: [`quantize`] forwards the chosen code
//! vectors and passes the incoming gradient straight through to the
//! un-quantized features. The codebook itself never receives gradients; it is
//! moved only by [`momentum_update`].

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookConfig {
    pub size: usize,
    pub decay: f64,
    pub eps: f64,
    /// Consecutive updates without any assignment before a code is re-seeded.
    pub patience: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self { size: 32, decay: 0.99, eps: 1e-5, patience: 200 }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config(format!("codebook size must be ≥ 2, got {}", self.size)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("codebook decay must lie in (0, 1), got {}", self.decay)));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("codebook eps must be positive".into()));
        }
        Ok(())
    }
}

/// `M` code vectors with their running assignment statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub vectors: Tensor,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Tensor,
    pub decay: f64,
    pub eps: f64,
    pub patience: usize,
    /// Updates since each code last received an assignment.
    pub idle_steps: Vec<u64>,
    /// Assignment histogram accumulated since the last [`Codebook::reset_usage`].
    pub usage: Vec<u64>,
}

impl Codebook {
    /// Codes drawn from `N(0, 1/d)`, each with a unit running count.
    pub fn init<R: Rng + ?Sized>(config: &CodebookConfig, dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let vectors = Tensor::randn(&[config.size, dim], 1.0 / (dim as f64).sqrt(), rng);
        Self::from_vectors(vectors, config)
    }

    /// Wraps explicit code vectors; running sums are chosen so the
    /// vectors already satisfy the smoothed-ratio invariant with unit counts.
    pub fn from_vectors(vectors: Tensor, config: &CodebookConfig) -> Result<Self> {
        config.validate()?;
        if vectors.rank() != 2 || vectors.shape()[0] != config.size {
            return Err(Error::shape(format!(
                "codebook vectors {:?} for size {}",
                vectors.shape(),
                config.size
            )));
        }
        let m = config.size;
        let mut cb = Self {
            ema_sums: vectors.clone(),
            vectors,
            ema_counts: vec![1.0; m],
            decay: config.decay,
            eps: config.eps,
            patience: config.patience,
            idle_steps: vec![0; m],
            usage: vec![0; m],
        };
        let smoothed = cb.smoothed_counts();
        let d = cb.dim();
        for (i, s) in smoothed.iter().enumerate() {
            for j in 0..d {
                cb.ema_sums.values_mut()[i * d + j] *= s;
            }
        }
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.ema_counts.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn code(&self, m: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.values()[m * d..(m + 1) * d]
    }

    /// Laplace-smoothed counts `(n_m + ε)·N/(N + Mε)`.
    pub fn smoothed_counts(&self) -> Vec<f64> {
        let total: f64 = self.ema_counts.iter().sum();
        let m = self.size() as f64;
        let scale = total / (total + m * self.eps);
        self.ema_counts.iter().map(|c| (c + self.eps) * scale).collect()
    }

    /// `exp(entropy)` of the usage histogram; 1 when nothing was recorded.
    pub fn perplexity(&self) -> f64 {
        perplexity(&self.usage)
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    fn recompute_vectors(&mut self) {
        let smoothed = self.smoothed_counts();
        let d = self.dim();
        let sums = self.ema_sums.values();
        let vecs = self.vectors.values_mut();
        for (m, s) in smoothed.iter().enumerate() {
            for j in 0..d {
                vecs[m * d + j] = sums[m * d + j] / s;
            }
        }
    }
}

pub fn perplexity(histogram: &[u64]) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let entropy: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

/// Code index per feature, shaped like the features without their last axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentMap {
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Nearest code by squared Euclidean distance; ties go to the lowest index.
pub fn assign(features: &Tensor, cb: &Codebook) -> Result<AssignmentMap> {
    let shape = features.shape();
    let d = *shape.last().ok_or_else(|| Error::shape("assign on empty shape"))?;
    if d != cb.dim() {
        return Err(Error::shape(format!("feature dim {d} does not match codebook dim {}", cb.dim())));
    }
    let codes = cb.vectors.values();
    let indices = features
        .values()
        .par_chunks(d)
        .map(|f| nearest(f, codes, d))
        .collect();
    Ok(AssignmentMap { shape: shape[..shape.len() - 1].to_vec(), indices })
}

fn nearest(f: &[f64], codes: &[f64], d: usize) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (m, c) in codes.chunks(d).enumerate() {
        let dist: f64 = f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best_dist = dist;
            best = m;
        }
    }
    best
}

/// Replaces every feature with its assigned code vector. The output value is
/// an exact copy of codebook rows; the gradient reaches `features` unchanged.
pub fn quantize(tape: &mut Tape, features: Var, cb: &Codebook) -> Result<(Var, AssignmentMap)> {
    let am = assign(tape.value(features), cb)?;
    let replacement = gather_codes(cb, &am, tape.shape(features))?;
    let out = tape.straight_through(features, replacement)?;
    Ok((out, am))
}

pub(crate) fn gather_codes(cb: &Codebook, am: &AssignmentMap, shape: &[usize]) -> Result<Tensor> {
    let d = cb.dim();
    let mut values = Vec::with_capacity(am.indices.len() * d);
    for &m in &am.indices {
        values.extend_from_slice(cb.code(m));
    }
    Tensor::new(shape, values)
}

/// What one [`momentum_update`] changed besides the running statistics.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub reseeded: Vec<usize>,
}

/// One EMA step: `n ← γn + (1−γ)·count`, `s ← γs + (1−γ)·Σf`, then every
/// code is reset to `s / smoothed(n)`. Codes idle for `patience` updates are
/// moved onto a random feature of this batch. Codes without assignments
/// decay their counts and sums alike, so their ratio moves only through the
/// smoothing term.
pub fn momentum_update<R: Rng + ?Sized>(
    cb: &mut Codebook,
    features: &Tensor,
    am: &AssignmentMap,
    rng: &mut R,
) -> Result<UpdateStats> {
    let d = cb.dim();
    let m = cb.size();
    if features.shape().last() != Some(&d) || features.len() / d != am.indices.len() {
        return Err(Error::shape(format!(
            "momentum update with features {:?} and {} assignments",
            features.shape(),
            am.indices.len()
        )));
    }
    let mut counts = vec![0.0; m];
    let mut sums = vec![0.0; m * d];
    for (f, &idx) in features.values().chunks(d).zip(&am.indices) {
        counts[idx] += 1.0;
        sums[idx * d..(idx + 1) * d].iter_mut().zip(f).for_each(|(s, v)| *s += v);
    }
    let g = cb.decay;
    for i in 0..m {
        cb.ema_counts[i] = g * cb.ema_counts[i] + (1.0 - g) * counts[i];
        cb.usage[i] += counts[i] as u64;
        if counts[i] > 0.0 {
            cb.idle_steps[i] = 0;
        } else {
            cb.idle_steps[i] += 1;
        }
    }
    for (s, &n) in cb.ema_sums.values_mut().iter_mut().zip(&sums) {
        *s = g * *s + (1.0 - g) * n;
    }

    let mut stats = UpdateStats::default();
    let rows = am.indices.len();
    for i in 0..m {
        if cb.patience > 0 && cb.idle_steps[i] >= cb.patience as u64 && rows > 0 {
            let pick = rng.random_range(0..rows);
            let f = &features.values()[pick * d..(pick + 1) * d];
            cb.ema_counts[i] = 1.0;
            cb.ema_sums.values_mut()[i * d..(i + 1) * d].copy_from_slice(f);
            cb.idle_steps[i] = 0;
            stats.reseeded.push(i);
        }
    }
    cb.recompute_vectors();
    Ok(stats)
}
