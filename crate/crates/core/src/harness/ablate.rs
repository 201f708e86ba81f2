//! Component ablations and hyperparameter sweeps, reported as plain-text
//! tables.

use std::fmt::Write as _;
use std::time::Instant;

use super::config::Config;
use super::retrieval::RetrievalMetrics;
use super::train::{evaluate, Trainer};
use crate::datagen::Dataset;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub label: String,
    pub t2v: RetrievalMetrics,
    pub v2t: RetrievalMetrics,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Trains `config` from scratch for `config.steps` steps and evaluates on
/// `val`.
pub fn train_and_evaluate(label: &str, config: &Config, train: &Dataset, val: &Dataset) -> Result<SweepRow> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config)?;
    let mut last = f64::NAN;
    trainer.run(train, config.steps, |_, r| last = r.loss)?;
    let eval = evaluate(&trainer.model, val)?;
    log::info!("{label}: {} | {} | loss {last:.4}", eval.t2v, eval.v2t);
    Ok(SweepRow { label: label.into(), t2v: eval.t2v, v2t: eval.v2t, final_loss: last, seconds: start.elapsed().as_secs_f64() })
}

/// The full model and each single-stage removal.
pub fn ablation_configs(base: &Config) -> Vec<(String, Config)> {
    let full = Config { disable_quantization: false, disable_aggregation: false, disable_interaction: false, ..base.clone() };
    vec![
        ("Full model".into(), full.clone()),
        ("- Interaction".into(), Config { disable_interaction: true, ..full.clone() }),
        ("- Aggregation".into(), Config { disable_aggregation: true, ..full.clone() }),
        ("- Quantization".into(), Config { disable_quantization: true, ..full }),
    ]
}

pub fn ablation_table(base: &Config, train: &Dataset, val: &Dataset) -> Result<Vec<SweepRow>> {
    ablation_configs(base).iter().map(|(label, cfg)| train_and_evaluate(label, cfg, train, val)).collect()
}

pub fn region_sweep(base: &Config, ks: &[usize], train: &Dataset, val: &Dataset) -> Result<Vec<SweepRow>> {
    ks.iter()
        .map(|&k| train_and_evaluate(&format!("K = {k}"), &Config { regions: k, ..base.clone() }, train, val))
        .collect()
}

pub fn depth_sweep(base: &Config, depths: &[usize], train: &Dataset, val: &Dataset) -> Result<Vec<SweepRow>> {
    depths
        .iter()
        .map(|&n| {
            let cfg = Config { interaction_depth: n, disable_interaction: false, ..base.clone() };
            train_and_evaluate(&format!("N_int = {n}"), &cfg, train, val)
        })
        .collect()
}

pub fn format_table(title: &str, rows: &[SweepRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{title}\n");
    writeln!(
        s,
        "{:<width$} | {:>6} {:>6} {:>6} {:>5} | {:>6} {:>6} {:>6} {:>5} | {:>8} {:>7}",
        "variant", "t2v@1", "t2v@5", "t2v@10", "MedR", "v2t@1", "v2t@5", "v2t@10", "MedR", "loss", "secs"
    )
    .ok();
    writeln!(s, "{}", "-".repeat(width + 82)).ok();
    for r in rows {
        writeln!(
            s,
            "{:<width$} | {:>6.1} {:>6.1} {:>6.1} {:>5} | {:>6.1} {:>6.1} {:>6.1} {:>5} | {:>8.4} {:>7.1}",
            r.label, r.t2v.r1, r.t2v.r5, r.t2v.r10, r.t2v.medr, r.v2t.r1, r.v2t.r5, r.v2t.r10, r.v2t.medr, r.final_loss, r.seconds
        )
        .ok();
    }
    s
}
