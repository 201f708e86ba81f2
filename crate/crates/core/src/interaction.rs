//! Joint space-time attention among region tokens.
//!
//! All `K·T` region vectors of a video form one token set. Attention logits
//! use a single shared linear embedding for both sides,
//! `α_ij = softmax_j(φ(s_i)·φ(s_j)/√d_attn)`, and the output mixes the raw
//! region vectors: `z_i = Σ_j α_ij s_j`. No value projection, residual or
//! feed-forward sublayer is applied.

use rand::Rng;

use crate::encoders::{project_shared, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct InteractionParams {
    pub d_attn: usize,
    /// One `d×d_attn` embedding per layer.
    pub phi: Vec<ParamId>,
}

impl InteractionParams {
    pub fn init<R: Rng>(depth: usize, dim: usize, d_attn: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if depth == 0 || d_attn == 0 {
            return Err(Error::Config("interaction depth and d_attn must be ≥ 1".into()));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let phi = (0..depth)
            .map(|i| store.add(format!("interaction.phi{i}"), Tensor::randn(&[dim, d_attn], std, rng)))
            .collect();
        Ok(Self { d_attn, phi })
    }

    pub fn depth(&self) -> usize {
        self.phi.len()
    }
}

/// Output of [`interact`]: contextualized regions and the attention of every
/// layer (`B×KT×KT`).
#[derive(Clone, Debug)]
pub struct Interaction {
    pub output: Var,
    pub attention: Vec<Var>,
}

/// `s: B×K×T×d → B×K×T×d`.
pub fn interact(tape: &mut Tape, bound: &Bound, p: &InteractionParams, s: Var) -> Result<Interaction> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("interact expects B×K×T×d, got {shape:?}")));
    }
    let (b, k, t, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut tokens = tape.reshape(s, &[b, k * t, d])?;
    let mut attention = Vec::with_capacity(p.depth());
    for &phi in &p.phi {
        let e = tape.matmul(tokens, bound[phi])?;
        let logits = tape.matmul_nt(e, e)?;
        let logits = tape.scale(logits, 1.0 / (p.d_attn as f64).sqrt());
        let alpha = tape.softmax(logits, 2)?;
        tokens = tape.matmul(alpha, tokens)?;
        attention.push(alpha);
    }
    let output = tape.reshape(tokens, &[b, k, t, d])?;
    Ok(Interaction { output, attention })
}

/// Mean over regions and frames, then projection into the shared space.
/// `z: B×K×T×d → B×d_shared`.
pub fn pool_video(tape: &mut Tape, bound: &Bound, enc: &EncoderParams, z: Var) -> Result<Var> {
    let pooled = mean_regions(tape, z)?;
    project_shared(tape, bound, enc, pooled, Modality::Video)
}

/// `B×K×T×d → B×d` mean over the `K·T` tokens.
pub fn mean_regions(tape: &mut Tape, z: Var) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("pool_video expects B×K×T×d, got {shape:?}")));
    }
    let flat = tape.reshape(z, &[shape[0], shape[1] * shape[2], shape[3]])?;
    tape.mean_axis(flat, 1)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoders::EncoderConfig;

    fn setup(depth: usize, d: usize, seed: u64) -> (ParamStore, InteractionParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = InteractionParams::init(depth, d, d, &mut store, &mut rng).unwrap();
        (store, p, rng)
    }

    fn run(store: &ParamStore, p: &InteractionParams, s: &Tensor) -> (Tensor, Vec<Tensor>) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(s.clone());
        let out = interact(&mut tape, &bound, p, x).unwrap();
        (tape.value(out.output).clone(), out.attention.iter().map(|&a| tape.value(a).clone()).collect())
    }

    #[test]
    fn single_token_is_identity() {
        let (store, p, mut rng) = setup(2, 5, 1);
        let s = Tensor::randn(&[3, 1, 1, 5], 1.0, &mut rng);
        assert_eq!(run(&store, &p, &s).0, s);
    }

    #[test]
    fn identical_tokens_unchanged() {
        let (store, p, mut rng) = setup(1, 4, 2);
        let v = Tensor::randn(&[4], 1.0, &mut rng);
        let s = Tensor::new(&[1, 2, 3, 4], v.values().repeat(6)).unwrap();
        let (z, _) = run(&store, &p, &s);
        assert!(z.max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn matches_naive_double_loop() {
        let (store, p, mut rng) = setup(1, 3, 3);
        let s = Tensor::randn(&[1, 2, 2, 3], 1.0, &mut rng);
        let (z, attn) = run(&store, &p, &s);
        let phi = store.get(p.phi[0]);
        let tokens: Vec<Vec<f64>> = s.values().chunks(3).map(<[f64]>::to_vec).collect();
        let emb: Vec<Vec<f64>> = tokens
            .iter()
            .map(|x| (0..3).map(|j| (0..3).map(|i| x[i] * phi.at(&[i, j])).sum()).collect())
            .collect();
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt())
                .collect();
            let zsum: f64 = logits.iter().map(|l| l.exp()).sum();
            let row_sum: f64 = attn[0].values()[i * 4..(i + 1) * 4].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
            for c in 0..3 {
                let expect: f64 = (0..4).map(|j| logits[j].exp() / zsum * tokens[j][c]).sum();
                assert!((z.values()[i * 3 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_are_convex_combinations() {
        let (store, p, mut rng) = setup(3, 4, 4);
        let s = Tensor::randn(&[2, 3, 2, 4], 2.0, &mut rng);
        let (z, attn) = run(&store, &p, &s);
        assert_eq!(attn.len(), 3);
        for b in 0..2 {
            for c in 0..4 {
                let vals: Vec<f64> = (0..6).map(|i| s.values()[(b * 6 + i) * 4 + c]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..6 {
                    let v = z.values()[(b * 6 + i) * 4 + c];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn large_embedding_scale_approaches_argmax() {
        let (mut store, p, mut rng) = setup(1, 3, 5);
        let s = Tensor::randn(&[1, 3, 1, 3], 1.0, &mut rng);
        let big = Tensor::new(store.get(p.phi[0]).shape(), store.get(p.phi[0]).values().iter().map(|v| v * 60.0).collect())
            .unwrap();
        *store.get_mut(p.phi[0]) = big;
        let (z, attn) = run(&store, &p, &s);
        let phi = store.get(p.phi[0]);
        let tokens: Vec<&[f64]> = s.values().chunks(3).collect();
        let emb: Vec<Vec<f64>> = tokens
            .iter()
            .map(|x| (0..3).map(|j| (0..3).map(|i| x[i] * phi.at(&[i, j])).sum()).collect())
            .collect();
        for i in 0..3 {
            let mut scores: Vec<(f64, usize)> =
                (0..3).map(|j| (emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt(), j)).collect();
            scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            if scores[0].0 - scores[1].0 < 20.0 {
                continue;
            }
            let best = scores[0].1;
            assert!(attn[0].values()[i * 3 + best] > 1.0 - 1e-8);
            for c in 0..3 {
                assert!((z.values()[i * 3 + c] - tokens[best][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pool_constant_and_unit_norm() {
        let cfg = EncoderConfig { d_model: 4, d_text: 4, d_shared: 3, mlp_hidden: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&cfg, &mut store, &mut rng).unwrap();
        let v = [0.5, -1.0, 2.0, 0.25];
        let zt = Tensor::new(&[1, 2, 3, 4], v.repeat(6)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let z = tape.constant(zt);
        let mean = mean_regions(&mut tape, z).unwrap();
        assert!(tape.value(mean).values().iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-15));

        let rz = tape.constant(Tensor::randn(&[2, 2, 3, 4], 1.0, &mut rng));
        let out = pool_video(&mut tape, &bound, &enc, rz).unwrap();
        for row in tape.value(out).values().chunks(3) {
            assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }

        // hand computation: mean, affine, normalize
        let zv = tape.value(rz).clone();
        let w = store.get(enc.video_proj_w);
        let bvec = store.get(enc.video_proj_b);
        for b in 0..2 {
            let mean: Vec<f64> = (0..4).map(|c| (0..6).map(|i| zv.values()[(b * 6 + i) * 4 + c]).sum::<f64>() / 6.0).collect();
            let y: Vec<f64> = (0..3).map(|j| bvec.values()[j] + (0..4).map(|c| mean[c] * w.at(&[c, j])).sum::<f64>()).collect();
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..3 {
                assert!((tape.value(out).at(&[b, j]) - y[j] / n).abs() < 1e-12);
            }
        }
    }
}
