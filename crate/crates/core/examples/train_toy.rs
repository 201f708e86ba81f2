//! Trains the reference configuration on freshly rendered data and reports
//! validation retrieval.
//!
//! ```text
//! cargo run --release --example train_toy -- [key=value ...]
//! ```
//! Any config key may be overridden, e.g. `steps=500 regions=8`.

use std::time::Instant;

use regionlearner::datagen::{generate_split, DataConfig, Dataset, Split};
use regionlearner::harness::{evaluate, Config, Trainer};

fn main() -> regionlearner::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = Config::reference();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or_else(|| regionlearner::Error::Config(format!("expected key=value, got {arg}")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let data = DataConfig::default();
    let train = Dataset::from_rendered(&generate_split(7, Split::Train, 512, &data)?)?;
    let val = Dataset::from_rendered(&generate_split(7, Split::Val, 64, &data)?)?;

    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg)?;
    let chunk = cfg.log_every.max(1) * 5;
    while trainer.step < cfg.steps {
        let until = (trainer.step + chunk).min(cfg.steps);
        let mut total = 0.0;
        let from = trainer.step;
        trainer.run(&train, until, |_, r| total += r.loss)?;
        let eval = evaluate(&trainer.model, &val)?;
        println!(
            "step {:>5}  loss {:.4}  perplexity {:>6.2}  {}  [{:.0}s]",
            trainer.step,
            total / (until - from) as f64,
            trainer.model.codebook.perplexity(),
            eval.t2v,
            start.elapsed().as_secs_f64()
        );
        trainer.model.codebook.reset_usage();
    }
    let eval = evaluate(&trainer.model, &val)?;
    println!("final\n  {}\n  {}", eval.t2v, eval.v2t);
    Ok(())
}
