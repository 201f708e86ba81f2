use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{primitive_registry, run_primitive};
use super::*;
use crate::error::Error;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = tape.constant(Tensor::eye(2));
    let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let ai = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(ai).values(), &[1., 2., 3., 4.]);
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab).values(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape(msg)) => {
            assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}")
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_hand_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).values(), &[0.5, 0.5]);
    let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).values();
    assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.softmax(x, 2).is_err());
}

proptest! {
    #[test]
    fn softmax_shift_invariant_and_normalized(
        xs in proptest::collection::vec(-20.0f64..20.0, 1..12),
        c in -50.0f64..50.0,
    ) {
        let n = xs.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[n], xs.clone()).unwrap());
        let shifted = tape.constant(Tensor::new(&[n], xs.iter().map(|v| v + c).collect()).unwrap());
        let a = tape.softmax(x, 0).unwrap();
        let b = tape.softmax(shifted, 0).unwrap();
        let sum: f64 = tape.value(a).values().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(a).values().iter().all(|&p| p >= 0.0));
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-9);
    }

    #[test]
    fn l2_normalize_unit_norm(xs in proptest::collection::vec(-10.0f64..10.0, 2..10)) {
        prop_assume!(xs.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let n = xs.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, n], xs).unwrap());
        let y = tape.l2_normalize(x, 1, 1e-12).unwrap();
        let norm = tape.value(y).values().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
    }
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = w.shape()[0];
    let mut out = Tensor::zeros(&[n, h, wd, k]);
    for bi in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..k {
                    let mut acc = b.values()[o];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as i64 + dy as i64 - 1, xx as i64 + dx as i64 - 1);
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                continue;
                            }
                            for ci in 0..c {
                                acc += w.at(&[o, dy, dx, ci]) * x.at(&[bi, sy as usize, sx as usize, ci]);
                            }
                        }
                    }
                    out.set(&[bi, y, xx, o], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_zero_weights_give_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[1, 4, 4, 2], 1.0, &mut rng));
    let w = tape.constant(Tensor::zeros(&[3, 3, 3, 2]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv2d_3x3(x, w, b).unwrap();
    assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_center_tap_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xin = Tensor::randn(&[1, 4, 4, 2], 1.0, &mut rng);
    let mut w = Tensor::zeros(&[2, 3, 3, 2]);
    w.set(&[0, 1, 1, 0], 1.0);
    w.set(&[1, 1, 1, 1], 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(xin.clone());
    let wv = tape.constant(w);
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv2d_3x3(x, wv, b).unwrap();
    assert_eq!(tape.value(y), &xin);
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[1, 4, 4, 2], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 3, 3, 2], 1.0, &mut rng);
    let b = Tensor::randn(&[3], 1.0, &mut rng);
    let expected = naive_conv(&x, &w, &b);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.conv2d_3x3(xv, wv, bv).unwrap();
    assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn conv_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 4, 2]));
    let w = tape.constant(Tensor::zeros(&[3, 3, 3, 5]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.conv2d_3x3(x, w, b), Err(Error::Shape(_))));
}

#[test]
fn l2_normalize_hand_values_and_zero_slice_counter() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3, 2], &[3., 4., 1., 0., 0., 0.]));
    let y = tape.l2_normalize(x, 1, 1e-12).unwrap();
    let v = tape.value(y).values();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    assert_eq!(&v[2..4], &[1.0, 0.0]);
    assert_eq!(&v[4..], &[0.0, 0.0]);
    assert_eq!(tape.diagnostics().zero_norm_slices, 1);
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xv = Tensor::randn(&[5], 1.0, &mut rng);
    let w = Tensor::randn(&[5], 1.0, &mut rng);

    let grad_of = |double_via_add: bool| {
        let mut tape = Tape::new();
        let x = tape.param(xv.clone());
        let y = if double_via_add { tape.add(x, x).unwrap() } else { tape.scale(x, 2.0) };
        let wc = tape.constant(w.clone());
        let p = tape.mul(y, wc).unwrap();
        let l = tape.sum_all(p);
        tape.backward(l).unwrap();
        tape.grad_tensor(x)
    };
    assert_eq!(grad_of(true), grad_of(false));
}

#[test]
fn backward_visits_each_op_once_and_is_repeatable() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let a = tape.param(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let b = tape.param(Tensor::randn(&[4, 2], 1.0, &mut rng));
        let c = tape.matmul(a, b).unwrap();
        let g = tape.gelu(c);
        let s = tape.softmax(g, 1).unwrap();
        let l = tape.sum_all(s);
        tape.backward(l).unwrap();
        let visits = tape.diagnostics().backward_visits;
        (tape.value(l).clone(), tape.grad_tensor(a), tape.grad_tensor(b), visits)
    };
    let first = run();
    assert_eq!(first.3, 4);
    let second = run();
    assert_eq!(first.0.values()[0].to_bits(), second.0.values()[0].to_bits());
    assert_eq!(first.1, second.1);
    assert_eq!(first.2, second.2);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(&[2]));
    assert!(tape.backward(a).is_err());
}

#[test]
fn every_primitive_passes_twenty_gradchecks() {
    for (i, check) in primitive_registry().iter().enumerate() {
        let res = run_primitive(check, 20, 100 + i as u64, DEFAULT_STEP).unwrap();
        assert!(res.max_rel_error < 1e-4, "{} max rel err {}", res.name, res.max_rel_error);
    }
}

#[test]
fn embedding_out_of_vocab() {
    let mut tape = Tape::new();
    let table = tape.param(Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.embedding(table, &[1, 4]), Err(Error::InvalidInput(_))));
}

#[test]
fn permute_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = tape.permute(v, &[2, 0, 1]).unwrap();
    assert_eq!(tape.shape(p), &[4, 2, 3]);
    assert_eq!(tape.value(p).at(&[3, 1, 2]), x.at(&[1, 2, 3]));
    let back = tape.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(tape.value(back), &x);
}
