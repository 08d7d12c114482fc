//! Small dense linear-algebra kernels used by the learners and diagnostics.

use nalgebra::{DMatrix, DVector};

/// Relative threshold below which a column's residual norm (after projecting
/// out the previously kept columns) marks it as linearly dependent.
pub const RANK_TOL: f64 = 1e-9;

/// Householder QR that processes columns in order and skips any column that
/// is numerically dependent on the columns kept before it.
#[derive(Debug, Clone)]
pub struct DeferredQr {
    /// Upper-triangular factor of the kept columns (k x k).
    r: DMatrix<f64>,
    /// Indices of kept columns, ascending.
    kept: Vec<usize>,
    ncols: usize,
    reflectors: Vec<(usize, DVector<f64>, f64)>,
    nrows: usize,
}

impl DeferredQr {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let (n, p) = x.shape();
        let mut a = x.clone();
        let mut kept = Vec::new();
        let mut reflectors = Vec::new();
        let mut k = 0usize;
        for j in 0..p {
            if k >= n {
                break;
            }
            let orig = x.column(j).norm();
            let tail_norm = a.view((k, j), (n - k, 1)).norm();
            if orig == 0.0 || tail_norm <= RANK_TOL * orig {
                continue;
            }
            let alpha = if a[(k, j)] > 0.0 { -tail_norm } else { tail_norm };
            let mut v = DVector::from_iterator(n - k, (k..n).map(|i| a[(i, j)]));
            v[0] -= alpha;
            let vnorm2 = v.norm_squared();
            if vnorm2 > 0.0 {
                let tau = 2.0 / vnorm2;
                for c in j..p {
                    let mut dot = 0.0;
                    for i in 0..n - k {
                        dot += v[i] * a[(k + i, c)];
                    }
                    let s = tau * dot;
                    if s != 0.0 {
                        for i in 0..n - k {
                            a[(k + i, c)] -= s * v[i];
                        }
                    }
                }
                reflectors.push((k, v, tau));
            }
            kept.push(j);
            k += 1;
        }
        let mut r = DMatrix::zeros(k, k);
        for (ci, &j) in kept.iter().enumerate() {
            for ri in 0..=ci {
                r[(ri, ci)] = a[(ri, j)];
            }
        }
        Self {
            r,
            kept,
            ncols: p,
            reflectors,
            nrows: n,
        }
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    /// `dropped[j]` is true for columns found dependent.
    pub fn dropped_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.ncols];
        for &j in &self.kept {
            m[j] = false;
        }
        m
    }

    fn apply_qt(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut b = y.to_vec();
        for (k, v, tau) in &self.reflectors {
            let mut dot = 0.0;
            for i in 0..v.len() {
                dot += v[i] * b[k + i];
            }
            let s = tau * dot;
            for i in 0..v.len() {
                b[k + i] -= s * v[i];
            }
        }
        b
    }

    /// Least-squares coefficients; dependent columns get exactly zero.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let qty = self.apply_qt(y);
        let k = self.rank();
        let mut z = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = qty[i];
            for c in i + 1..k {
                s -= self.r[(i, c)] * z[c];
            }
            z[i] = s / self.r[(i, i)];
        }
        let mut beta = vec![0.0; self.ncols];
        for (ci, &j) in self.kept.iter().enumerate() {
            beta[j] = z[ci];
        }
        beta
    }

    /// `(X_kᵀ X_k)^{-1}` over the kept columns, in kept order.
    pub fn xtx_inverse(&self) -> DMatrix<f64> {
        let k = self.rank();
        let mut rinv = DMatrix::<f64>::zeros(k, k);
        for c in 0..k {
            // Solve R x = e_c by back substitution.
            for i in (0..=c).rev() {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for m in i + 1..=c {
                    s -= self.r[(i, m)] * rinv[(m, c)];
                }
                rinv[(i, c)] = s / self.r[(i, i)];
            }
        }
        &rinv * rinv.transpose()
    }
}

/// Copies the given rows of `x` into a new matrix.
pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let p = x.ncols();
    DMatrix::from_fn(rows.len(), p, |i, j| x[(rows[i], j)])
}

/// Copies the given columns of `x` into a new matrix.
pub fn select_cols(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

/// Solves a symmetric positive-definite system, returning `None` when the
/// matrix is numerically singular.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let max_d = (0..a.nrows()).map(|i| l[(i, i)].abs()).fold(0.0, f64::max);
    let min_d = (0..a.nrows()).map(|i| l[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if a.nrows() > 0 && (min_d * min_d) <= 1e-13 * max_d * max_d {
        return None;
    }
    Some(chol.solve(b))
}

/// Inverse of a symmetric positive-definite matrix (`None` if singular).
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let max_d = (0..n).map(|i| l[(i, i)].abs()).fold(0.0, f64::max);
    let min_d = (0..n).map(|i| l[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if n > 0 && (min_d * min_d) <= 1e-13 * max_d * max_d {
        return None;
    }
    Some(chol.inverse())
}

pub fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Sequential mean (fixed summation order).
pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_through_origin() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let qr = DeferredQr::new(&x);
        let b = qr.solve(&[2.0, 4.0, 6.0]);
        assert!((b[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn duplicate_column_dropped() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 2.0, 0.0, 1.0, 1.0, 3.0, -1.0, -1.0, 1.0, 5.0, 5.0]);
        let qr = DeferredQr::new(&x);
        assert_eq!(qr.kept(), &[0, 1]);
        assert_eq!(qr.dropped_mask(), vec![false, false, true]);
        let b = qr.solve(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b[2], 0.0);
    }

    #[test]
    fn xtx_inverse_matches_direct() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.5, 2.0, -1.0, 0.0, 3.0, 1.5, 1.0, -2.0, 0.2]);
        let qr = DeferredQr::new(&x);
        let inv = qr.xtx_inverse();
        let direct = (x.transpose() * &x).try_inverse().unwrap();
        assert!((inv - direct).abs().max() < 1e-12);
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }
}
