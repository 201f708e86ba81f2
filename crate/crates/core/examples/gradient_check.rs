//! Finite-difference checks for every registered primitive and for the full
//! training loss on a two-sample batch.

use std::time::Instant;

use regionlearner::harness::pipeline_check::{pipeline_gradcheck, tiny_config};
use regionlearner::numerics::gradcheck::{primitive_registry, run_primitive};
use regionlearner::numerics::DEFAULT_STEP;

fn main() -> regionlearner::Result<()> {
    let start = Instant::now();
    for check in primitive_registry() {
        let r = run_primitive(&check, 20, 1, DEFAULT_STEP)?;
        println!("{:<20} {:.2e}  kinks {}", check.name, r.max_rel_error, r.kinks);
    }
    let p = pipeline_gradcheck(&tiny_config(), 1)?;
    println!(
        "{:<20} {:.2e}  (downstream {:.2e} over {} coords, upstream {:.2e} over {} coords)",
        "pipeline",
        p.max_rel_error(),
        p.downstream.max_rel_error,
        p.downstream.coordinates,
        p.upstream.max_rel_error,
        p.upstream.coordinates
    );
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
