//! Strided matrix product over `matrixmultiply`, split into fixed-size row
//! blocks of the output so results do not depend on the worker count.

use rayon::prelude::*;

const ROW_BLOCK: usize = 64;
const PAR_THRESHOLD: usize = 1 << 18;

/// Read-only strided view of an `rows × cols` matrix.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c[m×n] = a[m×k]·b[k×n]` (or `+=` when `accumulate`), `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m * n * k < PAR_THRESHOLD || m <= ROW_BLOCK {
        gemm_block(m, k, n, a, 0, b, c, beta);
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(|(blk, chunk)| {
        let rows = chunk.len() / n;
        gemm_block(rows, k, n, a, blk * ROW_BLOCK, b, chunk, beta);
    });
}

#[allow(clippy::too_many_arguments)]
fn gemm_block(m: usize, k: usize, n: usize, a: View<'_>, row0: usize, b: View<'_>, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let a_last = (row0 + m - 1) * a.rs + (k - 1) * a.cs;
    let b_last = (k - 1) * b.rs + (n - 1) * b.cs;
    assert!(a_last < a.data.len() && b_last < b.data.len(), "gemm view out of bounds");
    // SAFETY: bounds of every addressed element were checked above and `c`
    // holds exactly m·n row-major entries.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(row0 * a.rs),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn blocked_parallel_matches_naive() {
        let (m, k, n) = (300, 37, 29);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, View::row_major(&a, k), View::row_major(&b, n), &mut c, false);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }

    #[test]
    fn transposed_view_and_accumulate() {
        // aᵀ where a is stored 2×3
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![1.0; 6];
        gemm(3, 2, 2, View::transposed(&a, 3), View::row_major(&b, 2), &mut c, true);
        assert_eq!(c, vec![2.0, 5.0, 3.0, 6.0, 4.0, 7.0]);
    }
}
