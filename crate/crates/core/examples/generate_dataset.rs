//! Renders the synthetic corpus and prints a summary of what was written.
//!
//! ```text
//! cargo run --release --example generate_dataset -- /tmp/rl-data
//! ```

use std::path::PathBuf;

use regionlearner::datagen::{generate, Concept, DataConfig, Dataset};

fn main() -> regionlearner::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rl-data"));
    let paths = generate(7, 512, 64, &DataConfig::default(), &out)?;
    let val = Dataset::load(&paths.val)?;
    println!("train: {}", paths.train.display());
    println!("val:   {} ({} samples, {}×{}×{} frames)", paths.val.display(), val.len(), val.frames, val.height, val.width);
    for s in val.samples.iter().take(5) {
        let c = Concept::from_id(s.concept_id)?;
        println!("  concept {:>2}: {:?} {:?} {:?}  caption {:?}", s.concept_id, c.color, c.shape, c.motion, s.caption);
    }
    Ok(())
}
