//! Small dense matrix products used by the convolution kernels.
//!
//! Every output element is accumulated over the inner dimension in
//! increasing index order, so results depend only on the operands.

use crate::Scalar;

const MR: usize = 4;
const NR: usize = 4;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Columns are processed in panels of `NR`, packed contiguously, and rows in
/// groups of `MR` held in registers for the whole inner dimension.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut panel = vec![T::zero(); k * NR];
    let full = n - n % NR;
    for j in (0..full).step_by(NR) {
        for p in 0..k {
            panel[p * NR..p * NR + NR].copy_from_slice(&b[p * n + j..p * n + j + NR]);
        }
        let mut i = 0;
        while i + MR <= m {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            let (a0, a1, a2, a3) =
                (&a[i * k..][..k], &a[(i + 1) * k..][..k], &a[(i + 2) * k..][..k], &a[(i + 3) * k..][..k]);
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                let av = [a0[p], a1[p], a2[p], a3[p]];
                for r in 0..MR {
                    for s in 0..NR {
                        acc[r][s] += av[r] * bp[s];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            i += MR;
        }
        for i in i..m {
            let a_row = &a[i * k..][..k];
            let mut acc: [T; NR] = std::array::from_fn(|s| c[i * n + j + s]);
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                for s in 0..NR {
                    acc[s] += a_row[p] * bp[s];
                }
            }
            c[i * n + j..i * n + j + NR].copy_from_slice(&acc);
        }
    }
    if full < n {
        for i in 0..m {
            let a_row = &a[i * k..][..k];
            for j in full..n {
                let mut acc = c[i * n + j];
                for (p, &ap) in a_row.iter().enumerate() {
                    acc += ap * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, via an explicit transpose of `b`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let bt = transpose(n, k, &b[..n * k]);
    gemm_nn(m, k, n, a, &bt, c);
}

/// Row-major transpose of an `r×c` matrix.
pub(crate) fn transpose<T: Scalar>(r: usize, c: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
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

    fn fill(n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * s).sin()).collect()
    }

    #[test]
    fn products_match_naive() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (17, 300, 600), (4, 130, 3)] {
            let a = fill(m * k, 0.31);
            let b = fill(k * n, 0.17);
            let want = naive(m, k, n, &a, &b);
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }
            let bt = transpose(k, n, &b);
            let mut c2 = vec![0.0; m * n];
            gemm_nt(m, k, n, &a, &bt, &mut c2);
            for (x, y) in c2.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
