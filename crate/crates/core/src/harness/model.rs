//! The full video-text model: encoders, quantizer, region aggregation,
//! interaction, pooling and the contrastive objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use crate::encoders::{encode_text, encode_video, project_shared, EncoderParams, Modality, TextBatch, VideoBatch};
use crate::error::{Error, Result};
use crate::interaction::{interact, pool_video, InteractionParams};
use crate::numerics::{Tape, Tensor, Var};
use crate::objective::{contrastive_loss, similarity, Temperature};
use crate::params::{Bound, ParamId, ParamStore};
use crate::quantizer::{quantize, AssignmentMap, Codebook};
use crate::region::{aggregate, mean_region, reshape_grid, RegionMaskParams};

/// Trainable parameters plus the codebook.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub encoders: EncoderParams,
    pub regions: RegionMaskParams,
    pub interaction: InteractionParams,
    pub log_tau: Option<ParamId>,
    pub codebook: Codebook,
}

/// How the quantizer stage computes its output.
#[derive(Clone, Copy, Debug)]
pub enum QuantizeMode<'a> {
    /// Nearest code with a straight-through gradient.
    Nearest,
    /// `f + offset` with a constant offset. At the point where the offset was
    /// taken this equals the quantized value and has the same gradient, but
    /// it stays differentiable under small perturbations of `f`. `codes` are
    /// the quantized values at that point, used by the commitment term.
    Offset { offset: &'a Tensor, codes: &'a Tensor },
}

/// Video side of a forward pass.
#[derive(Clone, Debug)]
pub struct VideoForward {
    /// Patch features before quantization, `B×T×L×d`.
    pub features: Var,
    pub assignments: Option<AssignmentMap>,
    /// Quantized codes as a constant tensor (for the commitment term).
    pub codes: Option<Tensor>,
    /// `B×T×K×H'×W'` when aggregation is enabled.
    pub masks: Option<Var>,
    pub attention: Vec<Var>,
    /// Unit-norm `B×d_shared`.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub video: VideoForward,
    pub text_embedding: Var,
    pub similarity: Var,
    pub loss: Var,
}

impl Model {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoders = EncoderParams::init(&config.encoder(), &mut store, &mut rng)?;
        let regions = RegionMaskParams::init(config.regions, config.d_model, &mut store, &mut rng)?;
        let interaction =
            InteractionParams::init(config.interaction_depth, config.d_model, config.d_attn, &mut store, &mut rng)?;
        let log_tau = config
            .learnable_temperature
            .then(|| store.add("objective.log_tau", Tensor::scalar(config.temperature.ln())));
        let codebook = Codebook::init(&config.codebook(), config.d_model, &mut rng)?;
        Ok(Self { config: config.clone(), store, encoders, regions, interaction, log_tau, codebook })
    }

    pub fn temperature(&self) -> f64 {
        match self.log_tau {
            Some(id) => self.store.get(id).values()[0].exp(),
            None => self.config.temperature,
        }
    }

    pub fn video_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        video: &VideoBatch,
        mode: QuantizeMode<'_>,
    ) -> Result<VideoForward> {
        let cfg = &self.config;
        let features = encode_video(tape, bound, &self.encoders, video)?;
        let (quantized, assignments, codes) = if cfg.disable_quantization {
            (features, None, None)
        } else {
            match mode {
                QuantizeMode::Nearest => {
                    let (q, am) = quantize(tape, features, &self.codebook)?;
                    let codes = tape.value(q).clone();
                    (q, Some(am), Some(codes))
                }
                QuantizeMode::Offset { offset, codes } => {
                    let off = tape.constant(offset.clone());
                    let q = tape.add(features, off)?;
                    (q, None, Some(codes.clone()))
                }
            }
        };
        let grid = self.encoders.config.grid();
        let x = reshape_grid(tape, quantized, grid, grid)?;
        let (regions, masks) = if cfg.disable_aggregation {
            (mean_region(tape, x)?, None)
        } else {
            let r = aggregate(tape, bound, &self.regions, x)?;
            (r.features, Some(r.masks))
        };
        let (z, attention) = if cfg.disable_interaction {
            (regions, Vec::new())
        } else {
            let out = interact(tape, bound, &self.interaction, regions)?;
            (out.output, out.attention)
        };
        let embedding = pool_video(tape, bound, &self.encoders, z)?;
        Ok(VideoForward { features, assignments, codes, masks, attention, embedding })
    }

    pub fn text_forward(&self, tape: &mut Tape, bound: &Bound, text: &TextBatch) -> Result<Var> {
        let h = encode_text(tape, bound, &self.encoders, text)?;
        project_shared(tape, bound, &self.encoders, h, Modality::Text)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        video: &VideoBatch,
        text: &TextBatch,
        mode: QuantizeMode<'_>,
    ) -> Result<Forward> {
        if video.batch() != text.batch {
            return Err(Error::shape(format!("{} videos but {} captions", video.batch(), text.batch)));
        }
        let video = self.video_forward(tape, bound, video, mode)?;
        let text_embedding = self.text_forward(tape, bound, text)?;
        let sim = similarity(tape, video.embedding, text_embedding)?;
        let tau = match self.log_tau {
            Some(id) => Temperature::Log(bound[id]),
            None => Temperature::Fixed(self.config.temperature),
        };
        let mut loss = contrastive_loss(tape, sim, tau)?;
        if self.config.commitment_weight > 0.0 {
            if let Some(codes) = &video.codes {
                let c = tape.constant(codes.clone());
                let diff = tape.sub(video.features, c)?;
                let sq = tape.mul(diff, diff)?;
                let total = tape.sum_all(sq);
                let n = codes.len() as f64;
                let term = tape.scale(total, self.config.commitment_weight / n);
                loss = tape.add(loss, term)?;
            }
        }
        Ok(Forward { video, text_embedding, similarity: sim, loss })
    }

    /// Unit-norm embeddings of videos and captions, computed in chunks
    /// without gradients.
    pub fn embed(&self, videos: &VideoBatch, texts: &TextBatch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let v = self.video_forward(&mut tape, &bound, videos, QuantizeMode::Nearest)?;
        let t = self.text_forward(&mut tape, &bound, texts)?;
        Ok((tape.value(v.embedding).clone(), tape.value(t).clone()))
    }
}
