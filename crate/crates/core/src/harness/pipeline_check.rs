//! Finite-difference check of the full training loss.
//!
//! The nearest-code lookup is piecewise constant, so differencing through it
//! returns zero for every parameter upstream of the quantizer. The check is
//! therefore split in two:
//!
//! * parameters after the quantizer (regions, interaction, projections, text
//!   encoder, temperature) are checked through the real quantizer, whose
//!   output does not move when they are perturbed;
//! * video encoder parameters are checked with the quantizer replaced by
//!   `f + (c₀ − f₀)`, a constant offset taken at the sample point. Its value
//!   and gradient there equal those of the straight-through quantizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::model::{Model, QuantizeMode};
use crate::datagen::{BOS, EOS, PAD};
use crate::encoders::{TextBatch, VideoBatch};
use crate::error::Result;
use crate::numerics::{gradcheck, GradcheckReport, Tape, Tensor, Var, DEFAULT_STEP};
use crate::params::{Bound, ParamId};

/// A model small enough to difference every coordinate quickly.
pub fn tiny_config() -> Config {
    Config {
        frames: 2,
        frame_size: 8,
        patch: 4,
        d_model: 6,
        mlp_hidden: 8,
        vocab: 16,
        text_len: 6,
        d_text: 6,
        d_shared: 4,
        codebook_size: 8,
        regions: 2,
        d_attn: 4,
        batch_size: 2,
        ..Config::default()
    }
}

#[derive(Clone, Debug)]
pub struct PipelineCheck {
    pub downstream: GradcheckReport,
    pub upstream: GradcheckReport,
}

impl PipelineCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.downstream.max_rel_error.max(self.upstream.max_rel_error)
    }
}

/// Random 2-sample batch for `config`.
pub fn random_batch(config: &Config, rng: &mut ChaCha8Rng) -> Result<(VideoBatch, TextBatch)> {
    let (t, s) = (config.frames, config.frame_size);
    let video = VideoBatch::new(Tensor::uniform(&[2, t, 3, s, s], 0.0, 1.0, rng))?;
    let mut ids = Vec::new();
    let mut pad = Vec::new();
    for _ in 0..2 {
        let words = config.text_len.min(5) - 2;
        let mut row = vec![BOS as usize];
        row.extend((0..words).map(|_| rng.random_range(3..config.vocab)));
        row.push(EOS as usize);
        row.resize(config.text_len, PAD as usize);
        pad.extend(row.iter().map(|&i| i == PAD as usize));
        ids.extend(row);
    }
    Ok((video, TextBatch::new(ids, pad, 2, config.text_len)?))
}

fn check_subset(
    model: &Model,
    video: &VideoBatch,
    text: &TextBatch,
    selected: &[ParamId],
    mode: QuantizeMode<'_>,
) -> Result<GradcheckReport> {
    let inputs: Vec<Tensor> = selected.iter().map(|&id| model.store.get(id).clone()).collect();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let bound_vars: Vec<Var> = model
            .store
            .ids()
            .map(|id| match selected.iter().position(|&s| s == id) {
                Some(i) => vars[i],
                None => tape.constant(model.store.get(id).clone()),
            })
            .collect();
        let bound = Bound::from_vars(bound_vars);
        Ok(model.forward(tape, &bound, video, text, mode)?.loss)
    };
    gradcheck(&f, &inputs, DEFAULT_STEP)
}

/// Checks every parameter of a freshly initialised `config` model on a
/// random 2-sample batch.
pub fn pipeline_gradcheck(config: &Config, seed: u64) -> Result<PipelineCheck> {
    let model = Model::new(&Config { seed, ..config.clone() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (video, text) = random_batch(config, &mut rng)?;

    let upstream_ids = model.encoders.video_ids();
    let downstream_ids: Vec<ParamId> = model.store.ids().filter(|id| !upstream_ids.contains(id)).collect();
    let downstream = check_subset(&model, &video, &text, &downstream_ids, QuantizeMode::Nearest)?;

    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let base = model.video_forward(&mut tape, &bound, &video, QuantizeMode::Nearest)?;
    let f0 = tape.value(base.features);
    let codes = base.codes.clone().unwrap_or_else(|| f0.clone());
    let offset = Tensor::new(codes.shape(), codes.values().iter().zip(f0.values()).map(|(c, x)| c - x).collect())?;
    let upstream = check_subset(&model, &video, &text, &upstream_ids, QuantizeMode::Offset { offset: &offset, codes: &codes })?;
    Ok(PipelineCheck { downstream, upstream })
}
