//! Dense kernels shared by the forward and backward passes.
//!
//! Every output element of a product is accumulated in ascending order of the
//! inner index, independent of how many rows the left operand has, so a row's
//! result does not depend on which batch it was computed in.

use crate::scalar::Scalar;

/// `out += a (m x k) * b (k x n)`.
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&aip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if aip == S::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a^T * b` for `a: m x k`, `b: m x n`, `out: k x n`.
pub(crate) fn gemm_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&aip, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if aip == S::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut t = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tn_matches_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 3x2
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut direct = vec![0.0; 8];
        gemm_tn_acc(&a, &b, &mut direct, 3, 2, 4);
        let at = transpose(&a, 3, 2);
        let mut via = vec![0.0; 8];
        gemm_acc(&at, &b, &mut via, 2, 3, 4);
        for (x, y) in direct.iter().zip(&via) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
