//! Dense matrix kernels.
//!
//! Every matmul on the tape, forward and adjoint, goes through [`gemm`].

use crate::scalar::Scalar;

const BLOCK_K: usize = 128;
const BLOCK_N: usize = 256;

/// `c (+)= op(a) · op(b)` for row-major matrices, where `op` optionally
/// transposes. `op(a)` is `m×k`, `op(b)` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if trans_b && !trans_a {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                c[i * n + j] += arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
            }
        }
        return;
    }
    let a_owned;
    let a = if trans_a {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if trans_b {
        b_owned = transpose(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    for p0 in (0..k).step_by(BLOCK_K) {
        let p1 = (p0 + BLOCK_K).min(k);
        for j0 in (0..n).step_by(BLOCK_N) {
            let j1 = (j0 + BLOCK_N).min(n);
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let aip = arow[p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        }
    }
}

/// Transpose a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
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
    fn blocked_matches_naive_across_block_edges() {
        let (m, k, n) = (7, 300, 270);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }

    #[test]
    fn transposed_operands() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 1.0 - i as f64).collect();
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c, false);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }
}
