//! Cosine similarity between paired embeddings and the symmetric in-batch
//! contrastive loss over it.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

const UNIT_NORM_TOL: f64 = 1e-4;

/// Plain `N×N` similarity values, row `i` = video `i`, column `j` = text `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
    pub temperature: f64,
}

impl SimilarityMatrix {
    pub fn new(n: usize, values: Vec<f64>, temperature: f64) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return Err(Error::shape(format!("similarity matrix needs {n}×{n} values, got {}", values.len())));
        }
        Ok(Self { n, values, temperature })
    }

    /// Dot products of row-normalized video (`z`) and text (`y`) embeddings.
    pub fn from_embeddings(z: &Tensor, y: &Tensor, temperature: f64) -> Result<Self> {
        check_unit_rows(z, "video")?;
        check_unit_rows(y, "text")?;
        if z.shape() != y.shape() {
            return Err(Error::shape(format!("embeddings {:?} and {:?}", z.shape(), y.shape())));
        }
        let (n, d) = (z.shape()[0], z.shape()[1]);
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            let zi = &z.values()[i * d..(i + 1) * d];
            for j in 0..n {
                let yj = &y.values()[j * d..(j + 1) * d];
                values[i * n + j] = zi.iter().zip(yj).map(|(a, b)| a * b).sum();
            }
        }
        Self::new(n, values, temperature)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, video: usize, text: usize) -> f64 {
        self.values[video * self.n + text]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("{what} embeddings must be N×d, got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    for (i, row) in t.values().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!("{what} embedding {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// `z·yᵀ` on the tape; both inputs must have unit-norm rows.
pub fn similarity(tape: &mut Tape, z: Var, y: Var) -> Result<Var> {
    check_unit_rows(tape.value(z), "video")?;
    check_unit_rows(tape.value(y), "text")?;
    if tape.shape(z) != tape.shape(y) {
        return Err(Error::shape(format!("embeddings {:?} and {:?}", tape.shape(z), tape.shape(y))));
    }
    tape.matmul_nt(z, y)
}

/// Temperature of the contrastive logits.
#[derive(Clone, Copy, Debug)]
pub enum Temperature {
    Fixed(f64),
    /// Learnable `log τ` stored as a one-element tape variable.
    Log(Var),
}

/// `L_v2t + L_t2v` with `L_v2t = −mean_i log softmax_row(sim/τ)[i,i]` and
/// `L_t2v` the same over columns.
pub fn contrastive_loss(tape: &mut Tape, sim: Var, tau: Temperature) -> Result<Var> {
    let shape = tape.shape(sim).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("contrastive loss needs a square matrix, got {shape:?}")));
    }
    let n = shape[0];
    let logits = match tau {
        Temperature::Fixed(t) if t > 0.0 && t.is_finite() => tape.scale(sim, 1.0 / t),
        Temperature::Fixed(t) => return Err(Error::invalid(format!("temperature must be positive, got {t}"))),
        Temperature::Log(log_tau) => {
            let neg = tape.scale(log_tau, -1.0);
            let inv = tape.exp(neg);
            tape.mul_scalar(sim, inv)?
        }
    };
    let eye = tape.constant(Tensor::eye(n));
    let mut total = None;
    for axis in [1, 0] {
        let ls = tape.log_softmax(logits, axis)?;
        let diag = tape.mul(ls, eye)?;
        let s = tape.sum_all(diag);
        let l = tape.scale(s, -1.0 / n as f64);
        total = Some(match total {
            None => l,
            Some(prev) => tape.add(prev, l)?,
        });
    }
    Ok(total.expect("two directions"))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck;

    fn loss_of(sim: Vec<f64>, n: usize, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(&[n, n], sim).unwrap());
        let l = contrastive_loss(&mut tape, s, Temperature::Fixed(tau)).unwrap();
        tape.value(l).values()[0]
    }

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::randn(&[n, d], 1.0, rng);
        for row in t.values_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        t
    }

    #[test]
    fn single_pair_is_zero() {
        assert_eq!(loss_of(vec![0.3], 1, 0.05), 0.0);
    }

    #[test]
    fn constant_matrix_gives_two_log_n() {
        let l = loss_of(vec![0.37; 64 * 64], 64, 0.05);
        assert!((l - 2.0 * 64f64.ln()).abs() < 1e-6);
        assert!((l - 8.3178).abs() < 1e-4);
    }

    #[test]
    fn two_by_two_hand_value() {
        let l = loss_of(vec![1.0, 0.0, 0.0, 1.0], 2, 1.0);
        let expect = 2.0 * (1.0 + (-1f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.62652).abs() < 1e-5);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::eye(2));
        assert!(contrastive_loss(&mut tape, s, Temperature::Fixed(0.0)).is_err());
        assert!(contrastive_loss(&mut tape, s, Temperature::Fixed(-1.0)).is_err());
    }

    #[test]
    fn similarity_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::eye(3));
        let s = similarity(&mut tape, z, z).unwrap();
        assert_eq!(tape.value(s), &Tensor::eye(3));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zt = unit_rows(4, 3, &mut rng);
        let yt = unit_rows(4, 3, &mut rng);
        let (z, y) = (tape.constant(zt.clone()), tape.constant(yt.clone()));
        let s = similarity(&mut tape, z, z).unwrap();
        for i in 0..4 {
            assert!((tape.value(s).at(&[i, i]) - 1.0).abs() < 1e-12);
        }
        let s = similarity(&mut tape, z, y).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..3).map(|c| zt.at(&[i, c]) * yt.at(&[j, c])).sum();
                assert!((tape.value(s).at(&[i, j]) - dot).abs() < 1e-12);
            }
        }
        let plain = SimilarityMatrix::from_embeddings(&zt, &yt, 0.05).unwrap();
        assert!(plain.values().iter().zip(tape.value(s).values()).all(|(a, b)| (a - b).abs() < 1e-12));

        let bad = tape.constant(Tensor::full(&[4, 3], 1.0));
        assert!(matches!(similarity(&mut tape, bad, y), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradients_through_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let f = |tape: &mut Tape, v: &[Var]| {
            let zn = tape.l2_normalize(v[0], 1, 1e-12)?;
            let yn = tape.l2_normalize(v[1], 1, 1e-12)?;
            let s = similarity(tape, zn, yn)?;
            contrastive_loss(tape, s, Temperature::Fixed(0.05))
        };
        let report = gradcheck(&f, &[z, y], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn learnable_temperature_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let f = |tape: &mut Tape, v: &[Var]| contrastive_loss(tape, v[0], Temperature::Log(v[1]));
        let report = gradcheck(&f, &[s, Tensor::scalar(0.05f64.ln())], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn dominant_diagonal_with_small_tau_vanishes() {
        let sim = vec![0.9, 0.1, -0.2, 0.0, 0.8, 0.3, 0.2, 0.1, 0.7];
        let l = loss_of(sim, 3, 1e-3);
        assert!(l < 1e-12, "{l}");
    }

    proptest! {
        #[test]
        fn permutation_invariance_and_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let sim = Tensor::uniform(&[n, n], -1.0, 1.0, &mut rng);
            let perm = [3, 0, 4, 1, 2];
            let mut permuted = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    permuted[i * n + j] = sim.at(&[perm[i], perm[j]]);
                }
            }
            let a = loss_of(sim.values().to_vec(), n, 0.1);
            let b = loss_of(permuted, n, 0.1);
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn raising_diagonal_never_increases_loss(seed in 0u64..1000, i in 0usize..4, bump in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
            let mut raised = sim.clone();
            raised.set(&[i, i], sim.at(&[i, i]) + bump);
            prop_assert!(loss_of(raised.into_values(), 4, 0.2) <= loss_of(sim.into_values(), 4, 0.2) + 1e-12);
        }
    }
}
