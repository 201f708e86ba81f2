//! Saves a checkpoint mid-run, resumes from it and checks that the resumed
//! run reproduces the uninterrupted one bit for bit.

use regionlearner::datagen::{generate_split, DataConfig, Dataset, Split};
use regionlearner::harness::{load_checkpoint, save_checkpoint, Config, Trainer};

fn main() -> regionlearner::Result<()> {
    let cfg = Config { steps: 30, ..Config::default() };
    let train = Dataset::from_rendered(&generate_split(7, Split::Train, 128, &DataConfig::default())?)?;

    let mut straight = Trainer::new(&cfg)?;
    let mut losses = Vec::new();
    straight.run(&train, 30, |_, r| losses.push(r.loss))?;

    let dir = std::env::temp_dir().join("rl-checkpoint-demo");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("step20.rlck");
    let mut first = Trainer::new(&cfg)?;
    first.run(&train, 20, |_, _| {})?;
    save_checkpoint(&first, &path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let mut resumed = load_checkpoint(&path)?;
    let mut tail = Vec::new();
    resumed.run(&train, 30, |_, r| tail.push(r.loss))?;
    for (i, (a, b)) in losses[20..].iter().zip(&tail).enumerate() {
        println!("step {:>2}: uninterrupted {a:.17}  resumed {b:.17}  {}", 21 + i, if a.to_bits() == b.to_bits() { "identical" } else { "DIFFERENT" });
    }
    Ok(())
}
