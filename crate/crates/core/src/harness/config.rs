//! Experiment configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::quantizer::CodebookConfig;

macro_rules! config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every hyperparameter of a run. The text form produced by
        /// [`Config::to_text`] is embedded in checkpoints.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            /// Sets one field from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|e| {
                            Error::Config(format!("{key} = {value:?}: {e}"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( writeln!(out, "{} = {}", stringify!($field), self.$field).expect("write to String"); )*
                out
            }
        }
    };
}

config! {
    seed: u64 = 42,

    frames: usize = 4,
    frame_size: usize = 32,
    patch: usize = 8,
    d_model: usize = 64,
    video_blocks: usize = 1,
    mlp_hidden: usize = 128,
    vocab: usize = 64,
    text_len: usize = 8,
    d_text: usize = 64,
    text_blocks: usize = 1,
    d_shared: usize = 32,

    codebook_size: usize = 32,
    codebook_decay: f64 = 0.99,
    codebook_eps: f64 = 1e-5,
    codebook_patience: usize = 200,
    /// Weight of `mean ‖f − sg(c)‖²`; zero disables the term.
    commitment_weight: f64 = 0.0,

    regions: usize = 4,
    interaction_depth: usize = 1,
    d_attn: usize = 64,

    temperature: f64 = 0.05,
    learnable_temperature: bool = false,

    learning_rate: f64 = 1e-3,
    /// Anneal the learning rate to zero over `steps` along a half cosine.
    cosine_decay: bool = false,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    batch_size: usize = 64,
    steps: u64 = 2000,
    /// Batches never contain two samples of the same concept.
    strict_negatives: bool = true,
    log_every: u64 = 100,
    checkpoint_every: u64 = 0,

    disable_quantization: bool = false,
    disable_aggregation: bool = false,
    disable_interaction: bool = false,
}

impl Config {
    /// Settings of the toy retrieval experiment: a larger codebook that
    /// re-seeds idle codes quickly, a commitment term and 3000 steps.
    pub fn reference() -> Self {
        Self { codebook_size: 256, codebook_patience: 20, commitment_weight: 0.25, steps: 3000, ..Self::default() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            frames: self.frames,
            frame_size: self.frame_size,
            patch: self.patch,
            d_model: self.d_model,
            video_blocks: self.video_blocks,
            mlp_hidden: self.mlp_hidden,
            vocab: self.vocab,
            text_len: self.text_len,
            d_text: self.d_text,
            text_blocks: self.text_blocks,
            d_shared: self.d_shared,
        }
    }

    pub fn codebook(&self) -> CodebookConfig {
        CodebookConfig {
            size: self.codebook_size,
            decay: self.codebook_decay,
            eps: self.codebook_eps,
            patience: self.codebook_patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.codebook().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.regions == 0 || self.interaction_depth == 0 || self.d_attn == 0 {
            return bad("regions, interaction_depth and d_attn must be ≥ 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps <= 0.0 || self.commitment_weight.is_nan() || self.commitment_weight < 0.0 {
            return bad("adam_eps must be positive and commitment_weight non-negative".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be ≥ 2 for in-batch negatives, got {}", self.batch_size));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_reference_file_matches() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.cfg");
        assert_eq!(Config::load(Path::new(path)).unwrap(), Config::reference());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.regions = 8;
        cfg.disable_interaction = true;
        cfg.temperature = 0.07;
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(Config::KEYS.len(), cfg.to_text().lines().count());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse("# header\n\nregions = 2  # fewer\n seed=7\n").unwrap();
        assert_eq!((cfg.regions, cfg.seed), (2, 7));
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["colour = red", "regions", "regions = many", "regions = 0", "temperature = -1", "seed = 1\nseed = 2"] {
            assert!(matches!(Config::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
