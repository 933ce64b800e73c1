//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! For `A` of shape `m x n` with `m >= n`, column pairs of a working copy of
//! `A` are rotated until they are mutually orthogonal; the column norms are
//! then the singular values and the accumulated rotations form `V`. Wide
//! inputs are handled by factoring the transpose.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use super::subspace::gram_schmidt_complete;
use crate::error::{Error, Result};

/// Sweep stops once the off-diagonal Gram mass drops below this fraction of
/// the total Gram mass.
pub const CONVERGENCE_TOL: f64 = 1e-14;
pub const MAX_SWEEPS: usize = 60;

/// Thin singular value decomposition `A = U diag(s) Vᵀ`, `k = min(m, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    /// `m x k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `n x k`, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank_bound(&self) -> usize {
        self.s.len()
    }

    /// `U diag(s) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

/// Computes the thin SVD of `a`.
///
/// Output is bit-reproducible for identical input. Columns of `U` follow a
/// fixed sign convention: the entry of largest magnitude in each column is
/// non-negative (first such row on ties), and `V` is flipped to match.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidArgument(format!(
            "svd of empty {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    a.check_finite()?;
    let mut f = if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose());
        SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    apply_sign_convention(&mut f);
    Ok(f)
}

/// Singular values only.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

fn jacobi_tall(a: &Matrix) -> SvdFactors {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        let mut total = 0.0;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                off += 2.0 * gamma * gamma;
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        for col in &cols {
            let nrm = dot(col, col);
            total += nrm * nrm;
        }
        total += off;
        if !rotated || off.sqrt() <= CONVERGENCE_TOL * total.sqrt() {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal singular values keep their sweep order.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let smax = norms[order[0]];
    let negligible = smax * (m as f64) * f64::EPSILON;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vout = Vec::with_capacity(n);
    let mut needs_completion = 0;
    for &j in &order {
        let sigma = norms[j];
        s.push(sigma);
        vout.push(vcols[j].clone());
        if sigma > negligible && sigma > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else {
            needs_completion += 1;
        }
    }
    if needs_completion > 0 {
        gram_schmidt_complete(&mut ucols, m, n);
    }
    SvdFactors {
        u: Matrix::from_columns(m, &ucols),
        s,
        v: Matrix::from_columns(n, &vout),
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn apply_sign_convention(f: &mut SvdFactors) {
    let (m, k) = f.u.shape();
    for j in 0..k {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..m {
            let a = f.u[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if f.u[(best, j)] < 0.0 {
            for i in 0..m {
                f.u[(i, j)] = -f.u[(i, j)];
            }
            for i in 0..f.v.rows() {
                f.v[(i, j)] = -f.v[(i, j)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orth_err(q: &Matrix) -> f64 {
        (&q.t_matmul(q) - &Matrix::identity(q.cols())).frobenius_norm()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(f.s, vec![1.0, 1.0, 1.0]);
        assert!(f.u.matmul_t(&f.v).max_abs_diff(&Matrix::identity(3)) < 1e-15);
        assert!(orth_err(&f.u) < 3e-12 && orth_err(&f.v) < 3e-12);
    }

    #[test]
    fn diagonal_input_is_its_own_decomposition() {
        let f = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(f.s, vec![3.0, 1.0]);
        assert_eq!(f.u, Matrix::identity(2));
        assert_eq!(f.v, Matrix::identity(2));
    }

    #[test]
    fn ascending_diagonal_is_reordered() {
        let f = svd(&Matrix::diag(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(f.s, vec![3.0, 2.0, 1.0]);
        assert_eq!(f.u.column(0), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_matrix_gets_orthonormal_factors() {
        for (m, n) in [(3, 3), (4, 2), (2, 5)] {
            let f = svd(&Matrix::zeros(m, n)).unwrap();
            assert!(f.s.iter().all(|&s| s == 0.0));
            assert!(orth_err(&f.u) < 1e-14);
            assert!(orth_err(&f.v) < 1e-14);
        }
    }

    #[test]
    fn rank_deficient_input_keeps_orthonormal_u() {
        // rank 1, 4x3
        let a = Matrix::from_fn(4, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let f = svd(&a).unwrap();
        assert!(orth_err(&f.u) < 4e-12);
        assert!(orth_err(&f.v) < 4e-12);
        assert!(f.reconstruct().max_abs_diff(&a) < 1e-13);
        assert!(f.s[1] < 1e-13);
    }

    #[test]
    fn wide_input_uses_transpose() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]]);
        let f = svd(&a).unwrap();
        assert_eq!(f.u.shape(), (2, 2));
        assert_eq!(f.v.shape(), (3, 2));
        assert!(f.reconstruct().max_abs_diff(&a) < 1e-13);
    }

    #[test]
    fn rejects_non_finite_with_location() {
        let mut a = Matrix::identity(3);
        a[(2, 1)] = f64::INFINITY;
        match svd(&a) {
            Err(Error::NonFinite { row: 2, col: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sign_convention_makes_largest_entry_non_negative() {
        let a = Matrix::from_rows(&[[-4.0, 1.0], [0.5, -2.0], [1.0, 1.0]]);
        let f = svd(&a).unwrap();
        for j in 0..2 {
            let col = f.u.column(j);
            let (imax, _) = col.iter().enumerate().fold((0, -1.0), |(bi, bv), (i, v)| {
                if v.abs() > bv {
                    (i, v.abs())
                } else {
                    (bi, bv)
                }
            });
            assert!(col[imax] >= 0.0);
        }
    }
}
