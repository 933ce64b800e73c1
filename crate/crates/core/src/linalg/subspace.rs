//! Projectors onto column subspaces, norms, and subspace angles.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use super::svd::{svd, SvdFactors};
use crate::error::{Error, Result};
use crate::rng;

/// Orthogonal projector `Π = U Uᵀ`, stored by its `m x r` orthonormal basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    basis: Matrix,
}

impl Projector {
    /// Wraps a basis after checking `‖UᵀU − I‖_F ≤ r·1e-12`.
    pub fn from_orthonormal(basis: Matrix) -> Result<Self> {
        basis.check_finite()?;
        let r = basis.cols();
        if r == 0 || r > basis.rows() {
            return Err(Error::RankOutOfRange {
                rank: r,
                max: basis.rows(),
                context: Some("projector basis".into()),
            });
        }
        let err = orthonormality_error(&basis);
        if err > r as f64 * 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "projector basis is not orthonormal: ‖UᵀU − I‖_F = {err:.3e}"
            )));
        }
        Ok(Self { basis })
    }

    pub(crate) fn from_basis_unchecked(basis: Matrix) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    /// `Uᵀ X`, coordinates of `X`'s columns in the basis.
    pub fn compress(&self, x: &Matrix) -> Matrix {
        self.basis.t_matmul(x)
    }

    /// `U C`, lifting compact coordinates back to the ambient space.
    pub fn lift(&self, coords: &Matrix) -> Matrix {
        self.basis.matmul(coords)
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        project(self, x)
    }

    /// `(I − Π) X`.
    pub fn residual(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x - &project(self, x)?)
    }
}

/// Leading parts of a truncated SVD.
#[derive(Clone, Debug, PartialEq)]
pub struct Truncation {
    pub projector: Projector,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Truncation {
    /// `U_r diag(s_r) V_rᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.projector.basis().clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

pub fn truncate(f: &SvdFactors, r: usize) -> Result<Truncation> {
    let k = f.s.len();
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange {
            rank: r,
            max: k,
            context: None,
        });
    }
    Ok(Truncation {
        projector: Projector::from_basis_unchecked(f.u.leading_columns(r)),
        s: f.s[..r].to_vec(),
        v: f.v.leading_columns(r),
    })
}

/// `U_r U_rᵀ X`.
pub fn project(p: &Projector, x: &Matrix) -> Result<Matrix> {
    if p.dim() != x.rows() {
        return Err(Error::mismatch(
            "project",
            format!("{} rows", p.dim()),
            format!("{} rows", x.rows()),
        ));
    }
    Ok(p.lift(&p.compress(x)))
}

pub fn frobenius_norm(x: &Matrix) -> f64 {
    x.frobenius_norm()
}

pub fn spectral_norm(x: &Matrix) -> Result<f64> {
    Ok(svd(x)?.s[0])
}

/// Frobenius norm of `sin Θ` between two equal-rank subspaces.
///
/// Computed from the residual `(I − AAᵀ)B`, whose singular values are the
/// sines of the principal angles; this keeps small angles accurate, unlike
/// `√(1 − cos²)`.
pub fn sin_theta(a: &Projector, b: &Projector) -> Result<f64> {
    check_pair(a, b)?;
    let resid = b.basis() - &a.lift(&a.compress(b.basis()));
    let value = resid.frobenius_norm();
    Ok(value.min((a.rank() as f64).sqrt()))
}

/// Cosines of the principal angles: singular values of `AᵀB`.
pub fn principal_cosines(a: &Projector, b: &Projector) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    Ok(svd(&a.basis().t_matmul(b.basis()))?
        .s
        .into_iter()
        .map(|c| c.min(1.0))
        .collect())
}

fn check_pair(a: &Projector, b: &Projector) -> Result<()> {
    if a.dim() != b.dim() || a.rank() != b.rank() {
        return Err(Error::mismatch(
            "sin_theta",
            format!("{}x{}", a.dim(), a.rank()),
            format!("{}x{}", b.dim(), b.rank()),
        ));
    }
    Ok(())
}

/// `Σ_{i>r} σ_i²(A)`, the squared error of the best rank-`r` approximation.
pub fn tail_energy(a: &Matrix, r: usize) -> Result<f64> {
    let s = svd(a)?.s;
    tail_energy_of(&s, r)
}

pub fn tail_energy_of(s: &[f64], r: usize) -> Result<f64> {
    if r == 0 || r > s.len() {
        return Err(Error::RankOutOfRange {
            rank: r,
            max: s.len(),
            context: None,
        });
    }
    Ok(s[r..].iter().map(|x| x * x).sum())
}

/// Orthonormal basis from a seeded Gaussian `m x r` matrix.
pub fn random_orthonormal(m: usize, r: usize, seed: u64) -> Result<Projector> {
    if r == 0 || r > m {
        return Err(Error::RankOutOfRange {
            rank: r,
            max: m,
            context: Some("random_orthonormal".into()),
        });
    }
    let mut rng = rng::seeded(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    while cols.len() < r {
        let g = rng::gaussian_matrix(&mut rng, m, 1, 1.0).into_vec();
        if let Some(q) = orthonormalize_against(&cols, g, 1e-8) {
            cols.push(q);
        }
    }
    Ok(Projector::from_basis_unchecked(Matrix::from_columns(m, &cols)))
}

/// Orthogonalizes `v` against `basis` with two modified Gram-Schmidt passes
/// and normalizes it; returns `None` if less than `keep` of its norm survives.
fn orthonormalize_against(basis: &[Vec<f64>], mut v: Vec<f64>, keep: f64) -> Option<Vec<f64>> {
    let start = dot(&v, &v).sqrt();
    if start == 0.0 {
        return None;
    }
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, &v);
            for (x, y) in v.iter_mut().zip(q) {
                *x -= c * y;
            }
        }
    }
    let nrm = dot(&v, &v).sqrt();
    if nrm <= keep * start {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= nrm);
    Some(v)
}

/// Extends `cols` (orthonormal, length `m`) to `target` columns using
/// standard basis vectors, each time taking the one with the largest
/// component outside the current span (lowest index on ties).
pub(crate) fn gram_schmidt_complete(cols: &mut Vec<Vec<f64>>, m: usize, target: usize) {
    while cols.len() < target {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..m {
            let outside = 1.0 - cols.iter().map(|q| q[k] * q[k]).sum::<f64>();
            if outside > best.1 {
                best = (k, outside);
            }
        }
        let mut e = vec![0.0; m];
        e[best.0] = 1.0;
        // The chosen residual has squared norm at least (m - len) / m.
        let q = orthonormalize_against(cols, e, 0.0).expect("residual is nonzero");
        cols.push(q);
    }
}

/// Completes an `m x k` orthonormal basis to a full `m x m` orthogonal matrix
/// whose first `k` columns are the input.
pub fn complete_orthonormal_basis(u: &Matrix) -> Matrix {
    let m = u.rows();
    let mut cols: Vec<Vec<f64>> = (0..u.cols()).map(|j| u.column(j)).collect();
    gram_schmidt_complete(&mut cols, m, m);
    Matrix::from_columns(m, &cols)
}

/// Cayley transform `(I − S/2)⁻¹ (I + S/2)` of a skew-symmetric `S`.
///
/// The result is orthogonal; for small `S` it is `I + S + O(S²)`.
pub fn cayley_near_identity(skew: &Matrix, m: usize) -> Result<Matrix> {
    if skew.shape() != (m, m) {
        return Err(Error::mismatch(
            "cayley_near_identity",
            format!("{m}x{m}"),
            format!("{}x{}", skew.rows(), skew.cols()),
        ));
    }
    skew.check_finite()?;
    if !skew.is_skew_symmetric(1e-14 * skew.max_abs().max(1.0)) {
        return Err(Error::InvalidArgument(
            "cayley_near_identity requires a skew-symmetric matrix".into(),
        ));
    }
    let half = skew.scale(0.5);
    let id = Matrix::identity(m);
    let lhs = &id - &half;
    let rhs = &id + &half;
    solve(&lhs, &rhs)
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if !a.is_square() || b.rows() != n {
        return Err(Error::mismatch(
            "solve",
            format!("square A and {n}-row B"),
            format!("A {}x{}, B {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    let nrhs = b.cols();
    let scale = a.max_abs();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().partial_cmp(&lu[(j, col)].abs()).unwrap())
            .unwrap();
        if lu[(pivot, col)].abs() <= f64::EPSILON * scale * n as f64 {
            return Err(Error::Singular { op: "solve" });
        }
        if pivot != col {
            for j in 0..n {
                let tmp = lu[(col, j)];
                lu[(col, j)] = lu[(pivot, j)];
                lu[(pivot, j)] = tmp;
            }
            for j in 0..nrhs {
                let tmp = x[(col, j)];
                x[(col, j)] = x[(pivot, j)];
                x[(pivot, j)] = tmp;
            }
        }
        let p = lu[(col, col)];
        for i in (col + 1)..n {
            let f = lu[(i, col)] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[(i, j)] -= f * lu[(col, j)];
            }
            for j in 0..nrhs {
                x[(i, j)] -= f * x[(col, j)];
            }
        }
    }
    for col in (0..n).rev() {
        let p = lu[(col, col)];
        for j in 0..nrhs {
            let mut acc = x[(col, j)];
            for k in (col + 1)..n {
                acc -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = acc / p;
        }
    }
    Ok(x)
}

/// `‖QᵀQ − I‖_F`.
pub fn orthonormality_error(q: &Matrix) -> f64 {
    (&q.t_matmul(q) - &Matrix::identity(q.cols())).frobenius_norm()
}
