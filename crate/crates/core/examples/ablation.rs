//! Component ablation and the region-count / interaction-depth sweeps.
//!
//! ```text
//! cargo run --release --example ablation -- [steps]
//! ```

use regionlearner::datagen::{generate_split, DataConfig, Dataset, Split};
use regionlearner::harness::ablate::{ablation_table, depth_sweep, format_table, region_sweep};
use regionlearner::harness::Config;

fn main() -> regionlearner::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let data = DataConfig::default();
    let train = Dataset::from_rendered(&generate_split(7, Split::Train, 512, &data)?)?;
    let val = Dataset::from_rendered(&generate_split(7, Split::Val, 64, &data)?)?;
    let cfg = Config { steps, ..Config::reference() };

    print!("{}", format_table("Component ablation", &ablation_table(&cfg, &train, &val)?));
    println!();
    print!("{}", format_table("Number of regions", &region_sweep(&cfg, &[1, 2, 4, 8, 16], &train, &val)?));
    println!();
    print!("{}", format_table("Interaction depth", &depth_sweep(&cfg, &[1, 2, 3, 4], &train, &val)?));
    Ok(())
}
