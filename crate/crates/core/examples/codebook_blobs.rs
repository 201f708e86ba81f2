//! Momentum (EMA) codebook updates recovering the means of two Gaussian
//! blobs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use regionlearner::numerics::Tensor;
use regionlearner::quantizer::{assign, momentum_update, Codebook, CodebookConfig};

fn main() -> regionlearner::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let means = [[2.0, 0.0], [-2.0, 1.0]];
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    let cfg = CodebookConfig { size: 2, ..Default::default() };
    let mut cb = Codebook::from_vectors(Tensor::new(&[2, 2], vec![0.5, 0.0, -0.5, 0.0])?, &cfg)?;
    for step in 1..=2000 {
        let mut v = Vec::with_capacity(64 * 2);
        for i in 0..64 {
            let m = means[i % 2];
            v.extend([m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]);
        }
        let features = Tensor::new(&[64, 2], v)?;
        let am = assign(&features, &cb)?;
        momentum_update(&mut cb, &features, &am, &mut rng)?;
        if step % 400 == 0 {
            println!("step {step:>4}: c0 = {:.3?}  c1 = {:.3?}", cb.code(0), cb.code(1));
        }
    }
    println!("true means: {means:?}, usage perplexity {:.3}", cb.perplexity());
    Ok(())
}
