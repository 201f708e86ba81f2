//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every primitive appends one node holding its forward value and whatever it
//! needs to run backward. `backward` walks the tape once in reverse order and
//! accumulates (sums) gradients into every node that feeds more than one
//! consumer.

use rayon::prelude::*;

use super::gemm::{gemm, View};
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Counters collected while building and replaying a tape.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Slices whose norm fell below `eps` in `l2_normalize`.
    pub zero_norm_slices: usize,
    /// Forward results containing NaN or ±Inf.
    pub non_finite_forward: usize,
    /// Name of the first primitive that produced a non-finite value.
    pub first_non_finite: Option<&'static str>,
    /// Operations visited by the last `backward` call.
    pub backward_visits: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool, shared_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddSuffix(Var, Var),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize, mean: bool },
    SumAll(Var),
    L2Normalize { x: Var, axis: usize, eps: f64 },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv3x3 { x: Var, w: Var, b: Var },
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddSuffix(..) => "add_suffix",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum_all",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv3x3 { .. } => "conv2d_3x3",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives. Inputs of every node precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    diagnostics: Diagnostics,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros when never reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        if !value.all_finite() {
            self.diagnostics.non_finite_forward += 1;
            self.diagnostics.first_non_finite.get_or_insert(op.name());
        }
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    // ---------------------------------------------------------------------
    // Forward primitives
    // ---------------------------------------------------------------------

    /// Matrix product over the last two axes. `b` is either a shared `k×n`
    /// matrix applied to every leading index of `a`, or has the same leading
    /// axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Tape::matmul`] with the last two axes of `b` transposed: `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::shape(format!("matmul of {sa:?} and {sb:?}{}", if trans_b { "ᵀ" } else { "" }));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead != &sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.vals(a);
            let bv = self.vals(b);
            if shared_b {
                gemm(batch * m, k, n, View::row_major(av, k), b_view(bv, trans_b, k, n), &mut out, false);
            } else {
                out.par_chunks_mut(m * n).enumerate().for_each(|(g, c)| {
                    let ag = &av[g * m * k..(g + 1) * m * k];
                    let bg = &bv[g * k * n..(g + 1) * k * n];
                    gemm(m, k, n, View::row_major(ag, k), b_view(bg, trans_b, k, n), c, false);
                });
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            rg,
            Op::MatMul { a, b, batch, m, k, n, trans_b, shared_b },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn elementwise2(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let values = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a), values)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, op))
    }

    fn elementwise1(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let values = self.vals(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x), values).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.elementwise1(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.elementwise1(x, Op::Exp(x), f64::exp)
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.elementwise1(x, Op::Gelu(x), |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
    }

    /// `x + p` where the shape of `p` equals a trailing suffix of the shape of
    /// `x` (bias rows, positional tables).
    pub fn add_suffix(&mut self, x: Var, p: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sp = self.shape(p);
        if sp.len() > sx.len() || sx[sx.len() - sp.len()..] != *sp {
            return Err(Error::shape(format!("add_suffix of {sx:?} and {sp:?}")));
        }
        let pv = self.vals(p);
        let plen = pv.len();
        let values = self.vals(x).iter().enumerate().map(|(i, &v)| v + pv[i % plen]).collect();
        let t = Tensor::new(self.shape(x), values)?;
        let rg = self.rg(&[x, p]);
        Ok(self.push(t, rg, Op::AddSuffix(x, p)))
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(format!("mul_scalar needs a scalar, got {:?}", self.shape(s))));
        }
        let c = self.vals(s)[0];
        let values = self.vals(x).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x), values)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, rg, Op::MulScalar(x, s)))
    }

    fn check_axis(&self, x: Var, axis: usize, what: &str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(format!("{what}: axis {axis} invalid for {:?}", self.shape(x))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let mut out = self.vals(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| out[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (out[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let mut out = self.vals(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| out[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (out[base + j * inner] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[base + j * inner] -= lse;
                }
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::LogSoftmax { x, axis }))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(x, axis, "reduce")?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.vals(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::SumAxis { x, axis, mean }))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.vals(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::SumAll(x))
    }

    /// Scales every slice along `axis` to unit Euclidean norm. Slices with
    /// norm below `eps` are divided by `eps` instead and counted in
    /// [`Diagnostics::zero_norm_slices`].
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(x, axis, "l2_normalize")?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let mut out = self.vals(x).to_vec();
        let mut zero = 0;
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let norm = (0..n).map(|j| out[base + j * inner].powi(2)).sum::<f64>().sqrt();
                let denom = if norm < eps {
                    zero += 1;
                    eps
                } else {
                    norm
                };
                for j in 0..n {
                    out[base + j * inner] /= denom;
                }
            }
        }
        self.diagnostics.zero_norm_slices += zero;
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::L2Normalize { x, axis, eps }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("permute {axes:?} invalid for {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_values(self.vals(x), &shape, axes);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape(format!("transpose needs rank ≥ 2, got {:?}", self.shape(x))));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Gathers rows of a `V×d` table: output `ids.len()×d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("embedding table must be 2-d, got {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("id {bad} outside vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup with no ids"));
        }
        let tv = self.vals(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        self.check_axis(*first, axis, "concat")?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!("concat of {base:?} and {s:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                out.extend_from_slice(&self.vals(x)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let mut shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!("slice {start}..{} of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.vals(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Slice { x, axis, start }))
    }

    /// 3×3 cross-correlation with zero "same" padding.
    /// `x: N×H×W×C_in`, `w: K×3×3×C_in`, `b: K` → `N×H×W×K`.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != 3 || sw[2] != 3 {
            return Err(Error::shape(format!("conv2d_3x3 expects N×H×W×C and K×3×3×C, got {sx:?} and {sw:?}")));
        }
        if sw[3] != sx[3] {
            return Err(Error::shape(format!("conv2d_3x3 channel mismatch: input {sx:?}, weights {sw:?}")));
        }
        if sb != [sw[0]] {
            return Err(Error::shape(format!("conv2d_3x3 bias {sb:?} for {} output channels", sw[0])));
        }
        let (n, h, wd, c) = (sx[0], sx[1], sx[2], sx[3]);
        let k = sw[0];
        let cols = im2col(self.vals(x), n, h, wd, c);
        let rows = n * h * wd;
        let mut out = vec![0.0; rows * k];
        gemm(rows, 9 * c, k, View::row_major(&cols, 9 * c), View::transposed(self.vals(w), 9 * c), &mut out, false);
        let bv = self.vals(b);
        for row in out.chunks_mut(k) {
            for (o, &bias) in row.iter_mut().zip(bv) {
                *o += bias;
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, h, wd, k], out)?, rg, Op::Conv3x3 { x, w, b }))
    }

    /// Forward value `replacement`, gradient passed to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor) -> Result<Var> {
        if replacement.shape() != self.shape(x) {
            return Err(Error::shape(format!(
                "straight_through replacement {:?} for {:?}",
                replacement.shape(),
                self.shape(x)
            )));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(replacement, rg, Op::StraightThrough(x)))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Seeds `d(root)/d(root) = 1` and replays the tape in reverse.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar root, got {:?}", self.shape(root))));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        let mut visits = 0;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            visits += 1;
            let contributions = self.local_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                debug_assert!(v.0 < i, "tape order violated");
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(c),
                }
            }
        }
        self.diagnostics.backward_visits = visits;
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.values();
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul { a, b, batch, m, k, n, trans_b, shared_b } => {
                self.matmul_backward(g, a, b, batch, m, k, n, trans_b, shared_b)
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            &Op::Mul(a, b) => {
                let (av, bv) = (self.vals(a), self.vals(b));
                let da = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(av).map(|(g, x)| g * x).collect();
                vec![(a, da), (b, db)]
            }
            &Op::Scale(x, c) => vec![(x, g.iter().map(|v| v * c).collect())],
            &Op::AddSuffix(x, p) => {
                let plen = self.value(p).len();
                let mut dp = vec![0.0; plen];
                for chunk in g.chunks(plen) {
                    dp.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![(x, g.to_vec()), (p, dp)]
            }
            &Op::MulScalar(x, s) => {
                let c = self.vals(s)[0];
                let dx = g.iter().map(|v| v * c).collect();
                let ds = g.iter().zip(self.vals(x)).map(|(g, x)| g * x).sum();
                vec![(x, dx), (s, vec![ds])]
            }
            &Op::Exp(x) => vec![(x, g.iter().zip(out).map(|(g, y)| g * y).collect())],
            &Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(self.vals(x))
                    .map(|(g, &v)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![(x, dx)]
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * n * inner + ii;
                        let dot: f64 = (0..n).map(|j| out[base + j * inner] * g[base + j * inner]).sum();
                        for j in 0..n {
                            let p = base + j * inner;
                            dx[p] = out[p] * (g[p] - dot);
                        }
                    }
                }
                vec![(x, dx)]
            }
            &Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * n * inner + ii;
                        let gsum: f64 = (0..n).map(|j| g[base + j * inner]).sum();
                        for j in 0..n {
                            let p = base + j * inner;
                            dx[p] = g[p] - out[p].exp() * gsum;
                        }
                    }
                }
                vec![(x, dx)]
            }
            &Op::SumAxis { x, axis, mean } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let f = if mean { 1.0 / n as f64 } else { 1.0 };
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, g)| *d = g * f);
                    }
                }
                vec![(x, dx)]
            }
            &Op::SumAll(x) => vec![(x, vec![g[0]; self.value(x).len()])],
            &Op::L2Normalize { x, axis, eps } => {
                let xv = self.vals(x);
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * n * inner + ii;
                        let norm = (0..n).map(|j| xv[base + j * inner].powi(2)).sum::<f64>().sqrt();
                        if norm < eps {
                            for j in 0..n {
                                dx[base + j * inner] = g[base + j * inner] / eps;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|j| out[base + j * inner] * g[base + j * inner]).sum();
                            for j in 0..n {
                                let p = base + j * inner;
                                dx[p] = (g[p] - out[p] * dot) / norm;
                            }
                        }
                    }
                }
                vec![(x, dx)]
            }
            &Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, permute_values(g, node.value.shape(), &inverse))]
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (row, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]).for_each(|(a, b)| *a += b);
                }
                vec![(*table, dt)]
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut grads: Vec<Vec<f64>> = xs.iter().map(|&x| Vec::with_capacity(self.value(x).len())).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gx, &x) in grads.iter_mut().zip(xs) {
                        let len = self.shape(x)[*axis] * inner;
                        gx.extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                xs.iter().copied().zip(grads).collect()
            }
            &Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                let len = node.value.shape()[axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    dx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(x, dx)]
            }
            &Op::Conv3x3 { x, w, b } => {
                let sx = self.shape(x);
                let (n, h, wd, c) = (sx[0], sx[1], sx[2], sx[3]);
                let k = self.shape(w)[0];
                let rows = n * h * wd;
                let mut result = Vec::with_capacity(3);
                if self.requires_grad(w) {
                    let cols = im2col(self.vals(x), n, h, wd, c);
                    let mut dw = vec![0.0; k * 9 * c];
                    gemm(k, rows, 9 * c, View::transposed(g, k), View::row_major(&cols, 9 * c), &mut dw, false);
                    result.push((w, dw));
                }
                if self.requires_grad(x) {
                    let mut dcols = vec![0.0; rows * 9 * c];
                    gemm(rows, k, 9 * c, View::row_major(g, k), View::row_major(self.vals(w), 9 * c), &mut dcols, false);
                    result.push((x, col2im(&dcols, n, h, wd, c)));
                }
                let mut db = vec![0.0; k];
                for row in g.chunks(k) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                result.push((b, db));
                result
            }
            &Op::StraightThrough(x) => vec![(x, g.to_vec())],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &self,
        g: &[f64],
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shared_b: bool,
    ) -> Vec<(Var, Vec<f64>)> {
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut result = Vec::with_capacity(2);
        if self.requires_grad(a) {
            let mut da = vec![0.0; av.len()];
            if shared_b {
                gemm(batch * m, n, k, View::row_major(g, n), bt_view(bv, trans_b, k, n), &mut da, false);
            } else {
                da.par_chunks_mut(m * k).enumerate().for_each(|(i, dst)| {
                    let gg = &g[i * m * n..(i + 1) * m * n];
                    gemm(m, n, k, View::row_major(gg, n), bt_view(&bv[i * k * n..(i + 1) * k * n], trans_b, k, n), dst, false);
                });
            }
            result.push((a, da));
        }
        if self.requires_grad(b) {
            let mut db = vec![0.0; bv.len()];
            // non-transposed: dB[k×n] = Aᵀ·G; transposed: dB[n×k] = Gᵀ·A
            let block = |aa: &[f64], gg: &[f64], rows: usize, dst: &mut [f64]| {
                if trans_b {
                    gemm(n, rows, k, View::transposed(gg, n), View::row_major(aa, k), dst, false);
                } else {
                    gemm(k, rows, n, View::transposed(aa, k), View::row_major(gg, n), dst, false);
                }
            };
            if shared_b {
                block(av, g, batch * m, &mut db);
            } else {
                db.par_chunks_mut(k * n).enumerate().for_each(|(i, dst)| {
                    block(&av[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], m, dst);
                });
            }
            result.push((b, db));
        }
        result
    }
}

/// `b` as a k×n operand.
fn b_view(bs: &[f64], trans_b: bool, k: usize, n: usize) -> View<'_> {
    if trans_b {
        View::transposed(bs, k)
    } else {
        View::row_major(bs, n)
    }
}

/// `b` transposed, as an n×k operand.
fn bt_view(bs: &[f64], trans_b: bool, k: usize, n: usize) -> View<'_> {
    if trans_b {
        View::row_major(bs, k)
    } else {
        View::transposed(bs, n)
    }
}

fn permute_values(values: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(values.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..values.len() {
        out.push(values[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Rows are output pixels, columns `(dy, dx, c)` taps; out-of-frame taps are 0.
fn im2col(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut cols = vec![0.0; n * h * w * 9 * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * 9 * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (dy * 3 + dx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut x = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * 9 * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (dy * 3 + dx) * c;
                        x[dst..dst + c].iter_mut().zip(&cols[src..src + c]).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
    x
}
