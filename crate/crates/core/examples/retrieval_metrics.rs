//! Contrastive loss and retrieval metrics on hand-made similarity matrices.

use regionlearner::harness::retrieval::evaluate_scores;
use regionlearner::numerics::{Tape, Tensor};
use regionlearner::objective::{contrastive_loss, Temperature};

fn loss(n: usize, values: Vec<f64>, tau: f64) -> regionlearner::Result<f64> {
    let mut tape = Tape::new();
    let sim = tape.constant(Tensor::new(&[n, n], values)?);
    let l = contrastive_loss(&mut tape, sim, Temperature::Fixed(tau))?;
    Ok(tape.value(l).values()[0])
}

fn main() -> regionlearner::Result<()> {
    println!("constant 64×64, τ=0.05: {:.6} (2 ln 64 = {:.6})", loss(64, vec![0.3; 64 * 64], 0.05)?, 2.0 * 64f64.ln());
    println!("identity 2×2, τ=1:      {:.6}", loss(2, vec![1.0, 0.0, 0.0, 1.0], 1.0)?);

    // 4 videos × 4 captions; caption 2 prefers video 3.
    let sim = vec![
        0.9, 0.1, 0.0, 0.2, //
        0.2, 0.8, 0.1, 0.0, //
        0.1, 0.0, 0.5, 0.3, //
        0.0, 0.2, 0.7, 0.6,
    ];
    let (t2v, v2t) = evaluate_scores(4, 4, &sim)?;
    println!("{t2v}\n{v2t}");
    Ok(())
}
