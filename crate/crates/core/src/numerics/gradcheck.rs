//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(input, flat coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    /// Coordinates whose one-sided differences disagree, i.e. where the
    /// function looks non-differentiable at the sample point. They are still
    /// included in `max_rel_error`.
    pub kinks: Vec<(usize, usize)>,
    pub coordinates: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Scalar-valued function of tape inputs.
pub trait ScalarFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> ScalarFn for F {}

fn evaluate(f: &dyn ScalarFn, inputs: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compares backward gradients of `f` at `inputs` with central differences
/// of step `h`.
pub fn gradcheck(f: &dyn ScalarFn, inputs: &[Tensor], h: f64) -> Result<GradcheckReport> {
    let (mut tape, vars, out) = evaluate(f, inputs, true)?;
    let f0 = tape.value(out).values()[0];
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    drop(tape);

    let mut report = GradcheckReport { max_rel_error: 0.0, worst: None, kinks: Vec::new(), coordinates: 0 };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.values()[j];
            probe[i].values_mut()[j] = orig + h;
            let fp = scalar(f, &probe)?;
            probe[i].values_mut()[j] = orig - h;
            let fm = scalar(f, &probe)?;
            probe[i].values_mut()[j] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[i].values()[j] - numeric).abs() / numeric.abs().max(1.0);
            let one_sided_gap = ((fp - f0) / h - (f0 - fm) / h).abs();
            if one_sided_gap > 1e-2 * numeric.abs().max(1.0) {
                report.kinks.push((i, j));
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

fn scalar(f: &dyn ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let (tape, _, out) = evaluate(f, inputs, false)?;
    Ok(tape.value(out).values()[0])
}

/// One random instance of a registered primitive: its inputs and a scalar
/// readout built from it.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub f: Box<dyn ScalarFn>,
}

/// A named primitive with a generator of random gradcheck instances.
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Instance,
}

/// Summary over all instances of one primitive.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub kinks: usize,
}

/// `Σ out ⊙ w` for a fixed random weight shaped like `out`, so every output
/// coordinate carries a distinct sensitivity.
fn readout(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.shape(out), 1.0, &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn unary(shape: &[usize], rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var) -> Result<Var>) -> Instance {
    let seed = rng.random();
    Instance {
        inputs: vec![randn(shape, rng)],
        f: Box::new(move |t: &mut Tape, v: &[Var]| {
            let y = op(t, v[0])?;
            readout(t, y, seed)
        }),
    }
}

fn binary(sa: &[usize], sb: &[usize], rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Instance {
    let seed = rng.random();
    Instance {
        inputs: vec![randn(sa, rng), randn(sb, rng)],
        f: Box::new(move |t: &mut Tape, v: &[Var]| {
            let y = op(t, v[0], v[1])?;
            readout(t, y, seed)
        }),
    }
}

/// Every primitive the pipeline uses, each with a random-instance generator.
pub fn primitive_registry() -> Vec<PrimitiveCheck> {
    vec![
        PrimitiveCheck { name: "matmul", build: |r| binary(&[3, 4], &[4, 5], r, |t, a, b| t.matmul(a, b)) },
        PrimitiveCheck { name: "matmul_batched", build: |r| binary(&[2, 3, 4], &[2, 4, 3], r, |t, a, b| t.matmul(a, b)) },
        PrimitiveCheck { name: "matmul_shared", build: |r| binary(&[2, 3, 4], &[4, 2], r, |t, a, b| t.matmul(a, b)) },
        PrimitiveCheck { name: "matmul_nt", build: |r| binary(&[2, 3, 4], &[2, 5, 4], r, |t, a, b| t.matmul_nt(a, b)) },
        PrimitiveCheck { name: "add", build: |r| binary(&[3, 4], &[3, 4], r, |t, a, b| t.add(a, b)) },
        PrimitiveCheck { name: "sub", build: |r| binary(&[3, 4], &[3, 4], r, |t, a, b| t.sub(a, b)) },
        PrimitiveCheck { name: "mul", build: |r| binary(&[3, 4], &[3, 4], r, |t, a, b| t.mul(a, b)) },
        PrimitiveCheck { name: "add_suffix", build: |r| binary(&[2, 3, 4], &[3, 4], r, |t, a, b| t.add_suffix(a, b)) },
        PrimitiveCheck { name: "mul_scalar", build: |r| binary(&[3, 4], &[1], r, |t, a, b| t.mul_scalar(a, b)) },
        PrimitiveCheck { name: "scale", build: |r| unary(&[3, 4], r, |t, x| Ok(t.scale(x, -1.7))) },
        PrimitiveCheck { name: "exp", build: |r| unary(&[3, 4], r, |t, x| Ok(t.exp(x))) },
        PrimitiveCheck { name: "gelu", build: |r| unary(&[3, 4], r, |t, x| Ok(t.gelu(x))) },
        PrimitiveCheck { name: "softmax", build: |r| unary(&[8], r, |t, x| t.softmax(x, 0)) },
        PrimitiveCheck { name: "softmax_axis1", build: |r| unary(&[2, 5, 3], r, |t, x| t.softmax(x, 1)) },
        PrimitiveCheck { name: "log_softmax", build: |r| unary(&[3, 5], r, |t, x| t.log_softmax(x, 1)) },
        PrimitiveCheck { name: "log_softmax_axis0", build: |r| unary(&[4, 3], r, |t, x| t.log_softmax(x, 0)) },
        PrimitiveCheck { name: "sum_axis", build: |r| unary(&[2, 3, 4], r, |t, x| t.sum_axis(x, 1)) },
        PrimitiveCheck { name: "mean_axis", build: |r| unary(&[2, 3, 4], r, |t, x| t.mean_axis(x, 2)) },
        PrimitiveCheck { name: "sum_all", build: |r| unary(&[3, 4], r, |t, x| Ok(t.sum_all(x))) },
        PrimitiveCheck { name: "l2_normalize", build: |r| unary(&[3, 4], r, |t, x| t.l2_normalize(x, 1, 1e-12)) },
        PrimitiveCheck { name: "reshape", build: |r| unary(&[3, 4], r, |t, x| t.reshape(x, &[2, 6])) },
        PrimitiveCheck { name: "permute", build: |r| unary(&[2, 3, 4], r, |t, x| t.permute(x, &[2, 0, 1])) },
        PrimitiveCheck { name: "transpose", build: |r| unary(&[2, 3, 4], r, |t, x| t.transpose(x)) },
        PrimitiveCheck { name: "embedding", build: |r| unary(&[5, 3], r, |t, x| t.embedding(x, &[4, 0, 4, 2])) },
        PrimitiveCheck {
            name: "concat",
            build: |r| binary(&[2, 1, 3], &[2, 2, 3], r, |t, a, b| t.concat(&[a, b], 1)),
        },
        PrimitiveCheck { name: "slice", build: |r| unary(&[2, 5, 3], r, |t, x| t.slice(x, 1, 1, 3)) },
        PrimitiveCheck {
            name: "conv2d_3x3",
            build: |r| {
                let seed = r.random();
                Instance {
                    inputs: vec![randn(&[2, 4, 3, 2], r), randn(&[3, 3, 3, 2], r), randn(&[3], r)],
                    f: Box::new(move |t: &mut Tape, v: &[Var]| {
                        let y = t.conv2d_3x3(v[0], v[1], v[2])?;
                        readout(t, y, seed)
                    }),
                }
            },
        },
        PrimitiveCheck {
            name: "straight_through",
            build: |r| {
                let seed = r.random();
                let offset = randn(&[3, 4], r);
                Instance {
                    inputs: vec![randn(&[3, 4], r)],
                    f: Box::new(move |t: &mut Tape, v: &[Var]| {
                        // replacement tracks x by a frozen offset, which is the
                        // function the straight-through gradient differentiates
                        let moved: Vec<f64> =
                            t.value(v[0]).values().iter().zip(offset.values()).map(|(a, b)| a + b).collect();
                        let rep = Tensor::new(&[3, 4], moved)?;
                        let y = t.straight_through(v[0], rep)?;
                        let y2 = t.mul(y, y)?;
                        readout(t, y2, seed)
                    }),
                }
            },
        },
    ]
}

/// Runs `instances` random gradchecks of one registered primitive.
pub fn run_primitive(check: &PrimitiveCheck, instances: usize, seed: u64, h: f64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut res = SuiteResult { name: check.name.to_string(), instances, max_rel_error: 0.0, kinks: 0 };
    for _ in 0..instances {
        let inst = (check.build)(&mut rng);
        let report = gradcheck(inst.f.as_ref(), &inst.inputs, h)?;
        res.max_rel_error = res.max_rel_error.max(report.max_rel_error);
        res.kinks += report.kinks.len();
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.scale(v[0], 3.0);
            Ok(t.sum_all(y))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let report = gradcheck(&f, &[x], DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(report.kinks.is_empty());
        assert_eq!(report.coordinates, 6);
    }

    #[test]
    fn weighted_softmax_sum_under_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[8], 1.0, &mut rng);
        let w = Tensor::randn(&[8], 1.0, &mut rng);
        let f = move |t: &mut Tape, v: &[Var]| {
            let s = t.softmax(v[0], 0)?;
            let wc = t.constant(w.clone());
            let p = t.mul(s, wc)?;
            Ok(t.sum_all(p))
        };
        let report = gradcheck(&f, &[x], DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn kinks_are_reported_not_hidden() {
        // |x| built from x·sign(x) frozen at the sample point has a kink at 0
        let f = |t: &mut Tape, v: &[Var]| {
            let sign: Vec<f64> = t.value(v[0]).values().iter().map(|x| x.signum()).collect();
            let s = t.constant(Tensor::new(&[2], sign)?);
            let y = t.mul(v[0], s)?;
            Ok(t.sum_all(y))
        };
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let report = gradcheck(&f, &[x], DEFAULT_STEP).unwrap();
        assert_eq!(report.kinks, vec![(0, 0)]);
    }
}
