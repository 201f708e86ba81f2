//! Optimizer, batch schedule, training steps and validation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::model::{Model, QuantizeMode};
use super::retrieval::{evaluate_retrieval, RetrievalMetrics};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::objective::SimilarityMatrix;
use crate::params::ParamStore;
use crate::quantizer::{momentum_update, perplexity};

/// Adam moments for every parameter of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &Config) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = learning_rate_at(cfg, self.t);
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.values_mut(), g.values(), m.values_mut(), v.values_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Learning rate used for update number `t` (1-based).
pub fn learning_rate_at(cfg: &Config, t: u64) -> f64 {
    if !cfg.cosine_decay || cfg.steps == 0 {
        return cfg.learning_rate;
    }
    let progress = (t.saturating_sub(1) as f64 / cfg.steps as f64).min(1.0);
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// The batches of one epoch. With `strict` every batch holds distinct
/// concepts: samples are grouped by concept, and batch `j` of a round draws
/// the `j`-th shuffled sample of each concept. The order depends only on
/// `(seed, epoch)`.
pub fn epoch_batches(concepts: &[usize], batch_size: usize, strict: bool, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut batches = Vec::new();
    if strict {
        let num = concepts.iter().max().map_or(0, |m| m + 1);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num];
        for (i, &c) in concepts.iter().enumerate() {
            groups[c].push(i);
        }
        for g in &mut groups {
            g.shuffle(&mut rng);
        }
        let rounds = groups.iter().map(Vec::len).max().unwrap_or(0);
        for r in 0..rounds {
            let mut layer: Vec<usize> = groups.iter().filter_map(|g| g.get(r).copied()).collect();
            layer.shuffle(&mut rng);
            batches.extend(layer.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec));
        }
    } else {
        let mut all: Vec<usize> = (0..concepts.len()).collect();
        all.shuffle(&mut rng);
        batches.extend(all.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec));
    }
    if batches.is_empty() {
        return Err(Error::invalid(format!("{} samples give no batch of at least two pairs", concepts.len())));
    }
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Step number after this update (1-based).
    pub step: u64,
    pub loss: f64,
    /// Assignment perplexity within this batch; `None` without quantization.
    pub batch_perplexity: Option<f64>,
    pub reseeded: usize,
    pub zero_norm_slices: usize,
}

/// Complete mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    /// Drives codebook re-seeding.
    pub rng: ChaCha8Rng,
    plan: Option<(u64, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        let model = Model::new(config)?;
        let adam = Adam::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        Ok(Self { model, adam, step: 0, rng, plan: None })
    }

    pub fn from_parts(model: Model, adam: Adam, step: u64, rng: ChaCha8Rng) -> Self {
        Self { model, adam, step, rng, plan: None }
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    /// Sample indices of the batch used at the current step.
    pub fn next_batch(&mut self, data: &Dataset) -> Result<Vec<usize>> {
        let cfg = &self.model.config;
        let concepts: Vec<usize> = data.samples.iter().map(|s| s.concept_id).collect();
        let per_epoch = match &self.plan {
            Some((_, p)) => p.len() as u64,
            None => epoch_batches(&concepts, cfg.batch_size, cfg.strict_negatives, cfg.seed, 0)?.len() as u64,
        };
        let epoch = self.step / per_epoch;
        if self.plan.as_ref().map(|p| p.0) != Some(epoch) {
            let plan = epoch_batches(&concepts, cfg.batch_size, cfg.strict_negatives, cfg.seed, epoch)?;
            self.plan = Some((epoch, plan));
        }
        let plan = &self.plan.as_ref().expect("plan set above").1;
        Ok(plan[(self.step % per_epoch) as usize].clone())
    }

    /// One optimizer step on the given samples, followed by the codebook
    /// update.
    pub fn train_step(&mut self, data: &Dataset, indices: &[usize]) -> Result<StepReport> {
        let cfg = self.model.config.clone();
        if cfg.strict_negatives {
            let mut seen = std::collections::HashSet::new();
            if let Some(&dup) = indices.iter().find(|&&i| !seen.insert(data.samples[i].concept_id)) {
                return Err(Error::invalid(format!(
                    "concept {} appears twice in a strict-negatives batch",
                    data.samples[dup].concept_id
                )));
            }
        }
        let video = data.video_batch(indices)?;
        let text = data.text_batch(indices, cfg.text_len)?;
        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape);
        let fwd = self.model.forward(&mut tape, &bound, &video, &text, QuantizeMode::Nearest)?;
        let loss = tape.value(fwd.loss).values()[0];
        if !loss.is_finite() {
            return Err(Error::Numerical(self.dump(&tape, loss, "non-finite loss")));
        }
        tape.backward(fwd.loss)?;
        let grads = self.model.store.grads(&tape, &bound);
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.all_finite()) {
            let name = self.model.store.iter().nth(i).map_or("?", |(n, _)| n);
            let what = format!("non-finite gradient for {name}");
            return Err(Error::Numerical(self.dump(&tape, loss, &what)));
        }
        self.adam.step(&mut self.model.store, &grads, &cfg);

        let mut report = StepReport {
            step: self.step + 1,
            loss,
            batch_perplexity: None,
            reseeded: 0,
            zero_norm_slices: tape.diagnostics().zero_norm_slices,
        };
        if let Some(am) = &fwd.video.assignments {
            let mut hist = vec![0u64; self.model.codebook.size()];
            am.indices.iter().for_each(|&i| hist[i] += 1);
            report.batch_perplexity = Some(perplexity(&hist));
            let stats = momentum_update(&mut self.model.codebook, tape.value(fwd.video.features), am, &mut self.rng)?;
            report.reseeded = stats.reseeded.len();
        }
        self.step += 1;
        Ok(report)
    }

    fn dump(&self, tape: &Tape, loss: f64, what: &str) -> String {
        let mut s = format!("{what} at step {} (loss {loss})\n", self.step + 1);
        writeln!(s, "tape diagnostics: {:?}", tape.diagnostics()).ok();
        for (name, t) in self.model.store.iter() {
            let max = t.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            writeln!(s, "  {name}: max |w| = {max:.4e}, finite = {}", t.all_finite()).ok();
        }
        s
    }

    /// Trains until `self.step == until`, calling `on_step` after every step.
    pub fn run(&mut self, data: &Dataset, until: u64, mut on_step: impl FnMut(&Trainer, &StepReport)) -> Result<()> {
        while self.step < until {
            let batch = self.next_batch(data)?;
            let report = self.train_step(data, &batch)?;
            on_step(self, &report);
        }
        Ok(())
    }
}

/// Validation result.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub t2v: RetrievalMetrics,
    pub v2t: RetrievalMetrics,
    pub similarity: SimilarityMatrix,
}

/// Embeds every sample of `data` and scores all video-caption pairs.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    const CHUNK: usize = 64;
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("empty evaluation set"));
    }
    let d = model.config.d_shared;
    let (mut zs, mut ys) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let (z, y) = model.embed(&data.video_batch(&idx)?, &data.text_batch(&idx, model.config.text_len)?)?;
        zs.extend_from_slice(z.values());
        ys.extend_from_slice(y.values());
    }
    let z = Tensor::new(&[n, d], zs)?;
    let y = Tensor::new(&[n, d], ys)?;
    let similarity = SimilarityMatrix::from_embeddings(&z, &y, model.temperature())?;
    let (t2v, v2t) = evaluate_retrieval(&similarity);
    Ok(Evaluation { t2v, v2t, similarity })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_batches_have_distinct_concepts_and_cover_everything() {
        let concepts: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let batches = epoch_batches(&concepts, 4, true, 1, 3).unwrap();
        let mut all: Vec<usize> = batches.concat();
        for b in &batches {
            let mut c: Vec<usize> = b.iter().map(|&i| concepts[i]).collect();
            c.sort();
            c.dedup();
            assert_eq!(c.len(), b.len());
        }
        all.sort();
        assert_eq!(all, (0..40).filter(|&i| batches.iter().any(|b| b.contains(&i))).collect::<Vec<_>>());
        assert_eq!(batches, epoch_batches(&concepts, 4, true, 1, 3).unwrap());
        assert_ne!(batches, epoch_batches(&concepts, 4, true, 1, 4).unwrap());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = Config { cosine_decay: true, steps: 100, learning_rate: 2e-3, ..Config::default() };
        assert_eq!(learning_rate_at(&cfg, 1), 2e-3);
        assert!((learning_rate_at(&cfg, 51) - 1e-3).abs() < 1e-15);
        assert!(learning_rate_at(&cfg, 101) < 1e-18);
        assert_eq!(learning_rate_at(&cfg, 500), learning_rate_at(&cfg, 101));
        let flat = Config { cosine_decay: false, ..cfg };
        assert_eq!(learning_rate_at(&flat, 80), 2e-3);
    }

    #[test]
    fn adam_with_zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        let before = store.tensors().to_vec();
        let mut adam = Adam::new(&store);
        let cfg = Config { learning_rate: 0.0, ..Config::default() };
        adam.step(&mut store, &[Tensor::new(&[2], vec![3.0, -2.0]).unwrap()], &cfg);
        assert_eq!(store.tensors(), &before[..]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        let mut adam = Adam::new(&store);
        let cfg = Config { learning_rate: 0.1, adam_eps: 1e-12, ..Config::default() };
        adam.step(&mut store, &[Tensor::new(&[2], vec![3.0, -2.0]).unwrap()], &cfg);
        let w = store.tensors()[0].values();
        assert!((w[0] - 0.4).abs() < 1e-9 && (w[1] + 0.9).abs() < 1e-9, "{w:?}");
    }
}
