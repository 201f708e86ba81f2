//! Learned spatial region masks and mask-weighted pooling.
//!
//! A 3×3 convolution with `K` output channels scores every grid cell of a
//! frame, a spatial softmax turns each channel into a mask that sums to one,
//! and each region vector is the mask-weighted sum of the cell features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct RegionMaskParams {
    pub regions: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl RegionMaskParams {
    pub fn init<R: Rng>(regions: usize, dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if regions == 0 {
            return Err(Error::Config("region count must be ≥ 1".into()));
        }
        let std = 1.0 / ((9 * dim) as f64).sqrt();
        let weight = store.add("region.mask_w", Tensor::randn(&[regions, 3, 3, dim], std, rng));
        let bias = store.add("region.mask_b", Tensor::zeros(&[regions]));
        Ok(Self { regions, weight, bias })
    }
}

/// Aggregated regions and the masks that produced them.
#[derive(Clone, Copy, Debug)]
pub struct RegionFeatures {
    /// `B×K×T×d`
    pub features: Var,
    /// `B×T×K×H'×W'`, each spatial slice summing to one.
    pub masks: Var,
}

/// Unflattens `B×T×L×d` into `B×T×H'×W'×d`, row-major over the grid.
pub fn reshape_grid(tape: &mut Tape, fq: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
    let s = tape.shape(fq).to_vec();
    if s.len() != 4 || s[2] != grid_h * grid_w {
        return Err(Error::shape(format!("cannot arrange {s:?} on a {grid_h}×{grid_w} grid")));
    }
    tape.reshape(fq, &[s[0], s[1], grid_h, grid_w, s[3]])
}

/// Inverse of [`reshape_grid`].
pub fn flatten_grid(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("flatten_grid expects B×T×H'×W'×d, got {s:?}")));
    }
    tape.reshape(x, &[s[0], s[1], s[2] * s[3], s[4]])
}

/// Per frame: `masks = softmax_{h,w}(conv3x3(x_t))`, `s_k = Σ_{h,w} mask_k · x_t`.
pub fn aggregate(tape: &mut Tape, bound: &Bound, p: &RegionMaskParams, x: Var) -> Result<RegionFeatures> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("aggregate expects B×T×H'×W'×d, got {s:?}")));
    }
    let (b, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
    let k = p.regions;
    let frames = tape.reshape(x, &[b * t, h, w, d])?;
    let logits = tape.conv2d_3x3(frames, bound[p.weight], bound[p.bias])?;
    let logits = tape.reshape(logits, &[b * t, h * w, k])?;
    let logits = tape.permute(logits, &[0, 2, 1])?;
    let masks = tape.softmax(logits, 2)?;
    let cells = tape.reshape(frames, &[b * t, h * w, d])?;
    let pooled = tape.matmul(masks, cells)?;
    let pooled = tape.reshape(pooled, &[b, t, k, d])?;
    let features = tape.permute(pooled, &[0, 2, 1, 3])?;
    let masks = tape.reshape(masks, &[b, t, k, h, w])?;
    Ok(RegionFeatures { features, masks })
}

/// Aggregation bypass: one region per frame holding the spatial mean.
/// Returns `B×1×T×d`.
pub fn mean_region(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("mean_region expects B×T×H'×W'×d, got {s:?}")));
    }
    let cells = tape.reshape(x, &[s[0], s[1], s[2] * s[3], s[4]])?;
    let m = tape.mean_axis(cells, 2)?;
    tape.reshape(m, &[s[0], 1, s[1], s[4]])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck;

    fn setup(k: usize, d: usize, seed: u64) -> (ParamStore, RegionMaskParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = RegionMaskParams::init(k, d, &mut store, &mut rng).unwrap();
        (store, p, rng)
    }

    #[test]
    fn grid_round_trip_and_tagging() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(&[1, 1, 16, 2]);
        for l in 0..16 {
            t.set(&[0, 0, l, 0], l as f64);
        }
        let f = tape.constant(t.clone());
        let g = reshape_grid(&mut tape, f, 4, 4).unwrap();
        assert_eq!(tape.shape(g), &[1, 1, 4, 4, 2]);
        assert_eq!(tape.value(g).at(&[0, 0, 2, 3, 0]), 11.0);
        let back = flatten_grid(&mut tape, g).unwrap();
        assert_eq!(tape.value(back), &t);
        assert!(reshape_grid(&mut tape, f, 3, 5).is_err());
    }

    #[test]
    fn zero_conv_gives_uniform_masks_and_spatial_mean() {
        let (mut store, p, mut rng) = setup(3, 4, 1);
        *store.get_mut(p.weight) = Tensor::zeros(&[3, 3, 3, 4]);
        let xv = Tensor::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(xv.clone());
        let r = aggregate(&mut tape, &bound, &p, x).unwrap();
        assert!(tape.value(r.masks).values().iter().all(|&m| (m - 1.0 / 16.0).abs() < 1e-15));
        for t in 0..2 {
            for c in 0..4 {
                let mean: f64 = (0..16).map(|l| xv.at(&[0, t, l / 4, l % 4, c])).sum::<f64>() / 16.0;
                for k in 0..3 {
                    assert!((tape.value(r.features).at(&[0, k, t, c]) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn saturated_bias_selects_one_cell() {
        // +20 at cell (1,1) only: a kernel reading a one-hot indicator channel
        let (mut store, p, mut rng) = setup(1, 3, 2);
        let mut w = Tensor::zeros(&[1, 3, 3, 3]);
        w.set(&[0, 1, 1, 2], 20.0);
        *store.get_mut(p.weight) = w;
        let mut xv = Tensor::randn(&[1, 1, 4, 4, 3], 0.3, &mut rng);
        for h in 0..4 {
            for ww in 0..4 {
                xv.set(&[0, 0, h, ww, 2], if (h, ww) == (1, 1) { 1.0 } else { 0.0 });
            }
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(xv.clone());
        let r = aggregate(&mut tape, &bound, &p, x).unwrap();
        // softmax saturation: 15 cells at logit 0 against one at 20
        let leak = 15.0 * (-20f64).exp() / (1.0 + 15.0 * (-20f64).exp());
        for c in 0..3 {
            let diff = (tape.value(r.features).at(&[0, 0, 0, c]) - xv.at(&[0, 0, 1, 1, c])).abs();
            assert!(diff < 1e-6 && diff <= leak * 10.0, "channel {c} off by {diff}");
        }
    }

    #[test]
    fn matches_double_loop() {
        let (store, p, mut rng) = setup(4, 8, 3);
        let xv = Tensor::randn(&[1, 1, 4, 4, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(xv.clone());
        let r = aggregate(&mut tape, &bound, &p, x).unwrap();

        // naive: explicit conv, softmax and weighted sum
        let w = store.get(p.weight);
        let bias = store.get(p.bias);
        for k in 0..4 {
            let mut logits = [[0.0; 4]; 4];
            for (h, row) in logits.iter_mut().enumerate() {
                for (ww, cell) in row.iter_mut().enumerate() {
                    let mut acc = bias.values()[k];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (h as i64 + dy - 1, ww as i64 + dx - 1);
                            if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                for c in 0..8 {
                                    acc += w.at(&[k, dy as usize, dx as usize, c])
                                        * xv.at(&[0, 0, sy as usize, sx as usize, c]);
                                }
                            }
                        }
                    }
                    *cell = acc;
                }
            }
            let z: f64 = logits.iter().flatten().map(|v| v.exp()).sum();
            for c in 0..8 {
                let mut s = 0.0;
                for h in 0..4 {
                    for ww in 0..4 {
                        s += logits[h][ww].exp() / z * xv.at(&[0, 0, h, ww, c]);
                    }
                }
                assert!((tape.value(r.features).at(&[0, k, 0, c]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masks_are_positive_convex_weights() {
        let (store, p, mut rng) = setup(4, 6, 4);
        let xv = Tensor::randn(&[2, 3, 4, 4, 6], 2.0, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(xv.clone());
        let r = aggregate(&mut tape, &bound, &p, x).unwrap();
        assert_eq!(tape.shape(r.features), &[2, 4, 3, 6]);
        assert_eq!(tape.shape(r.masks), &[2, 3, 4, 4, 4]);
        for slice in tape.value(r.masks).values().chunks(16) {
            assert!((slice.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(slice.iter().all(|&m| m > 0.0));
        }
        for b in 0..2 {
            for t in 0..3 {
                for c in 0..6 {
                    let cells: Vec<f64> = (0..16).map(|l| xv.at(&[b, t, l / 4, l % 4, c])).collect();
                    let lo = cells.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for k in 0..4 {
                        let v = tape.value(r.features).at(&[b, k, t, c]);
                        assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_reach_masks_and_features() {
        let (store, p, mut rng) = setup(2, 3, 5);
        let xv = Tensor::randn(&[1, 2, 3, 3, 3], 1.0, &mut rng);
        let readout = Tensor::randn(&[1, 2, 2, 3], 1.0, &mut rng);
        let f = move |tape: &mut Tape, v: &[Var]| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let r = aggregate(tape, &bound, &p, v[0])?;
            let w = tape.constant(readout.clone());
            let y = tape.mul(r.features, w)?;
            Ok(tape.sum_all(y))
        };
        let mut inputs = vec![xv];
        inputs.extend(store.tensors().iter().cloned());
        let report = gradcheck(&f, &inputs, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn saturated_mask_follows_translation() {
        // indicator channel marks one interior cell; shift it by one column
        let (mut store, p, _) = setup(1, 2, 6);
        let mut w = Tensor::zeros(&[1, 3, 3, 2]);
        w.set(&[0, 1, 1, 1], 25.0);
        *store.get_mut(p.weight) = w;
        let mask_peak = |col: usize| {
            let mut xv = Tensor::zeros(&[1, 1, 4, 4, 2]);
            xv.set(&[0, 0, 1, col, 1], 1.0);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.constant(xv);
            let r = aggregate(&mut tape, &bound, &p, x).unwrap();
            let m = tape.value(r.masks).values().to_vec();
            m.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        };
        assert_eq!(mask_peak(1), 4 + 1);
        assert_eq!(mask_peak(2), 4 + 2);
    }

    #[test]
    fn mean_region_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4, 5], 2.0));
        let m = mean_region(&mut tape, x).unwrap();
        assert_eq!(tape.shape(m), &[2, 1, 3, 5]);
        assert!(tape.value(m).values().iter().all(|&v| v == 2.0));
    }
}
