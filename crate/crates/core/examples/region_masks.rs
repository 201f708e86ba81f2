//! Trains briefly, then exports frames, code maps and region masks of one
//! validation video and reports where each mask's centre of mass falls.
//!
//! ```text
//! cargo run --release --example region_masks -- [steps] [out_dir]
//! ```

use std::path::PathBuf;

use regionlearner::datagen::{generate_split, DataConfig, Dataset, Split};
use regionlearner::harness::{video_maps, visualize, Config, Trainer};

fn main() -> regionlearner::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(Ok(400), |s| s.parse()).map_err(|e| regionlearner::Error::Config(format!("steps: {e}")))?;
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rl-masks"));

    let data = DataConfig::default();
    let train = Dataset::from_rendered(&generate_split(7, Split::Train, 512, &data)?)?;
    let val = generate_split(7, Split::Val, 64, &data)?;
    let mut trainer = Trainer::new(&Config { steps, ..Config::reference() })?;
    trainer.run(&train, steps, |_, _| {})?;

    // concept 1: red square moving right
    let sample = &val[1];
    let files = visualize(&trainer.model, &sample.pair, &out)?;
    println!("wrote {} files to {}", files.len(), out.display());
    let maps = video_maps(&trainer.model, &sample.pair)?;
    for (t, bbox) in sample.boxes.iter().enumerate() {
        print!("frame {t}: object {bbox:?}");
        for k in 0..trainer.model.config.regions {
            if let Some((x, y)) = maps.center_of_mass(t, k) {
                print!("  m{k}=({x:.1},{y:.1}){}", if bbox.contains(x, y) { "*" } else { "" });
            }
        }
        println!();
    }
    Ok(())
}
