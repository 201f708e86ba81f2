#![allow(dead_code)]

use regionlearner::datagen::{generate_split, DataConfig, Dataset, RenderedSample, Split};
use regionlearner::harness::Config;

/// A model small enough for quick end-to-end tests.
pub fn small_config() -> Config {
    Config {
        d_model: 16,
        mlp_hidden: 16,
        d_text: 16,
        d_shared: 8,
        d_attn: 8,
        codebook_size: 16,
        batch_size: 16,
        steps: 20,
        ..Config::default()
    }
}

pub fn rendered(split: Split, n: usize) -> Vec<RenderedSample> {
    generate_split(7, split, n, &DataConfig::default()).expect("render")
}

pub fn dataset(split: Split, n: usize) -> Dataset {
    Dataset::from_rendered(&rendered(split, n)).expect("dataset")
}
