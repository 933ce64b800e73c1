//! Construction of fine-tuned weights `W* = (U P) Σ* (V Q)ᵀ` from a base
//! weight's SVD, with `P`, `Q` exactly orthogonal and close to identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cayley_near_identity, complete_orthonormal_basis, svd, Matrix};
use crate::rng;

/// Skew-symmetric `m x m` with strictly-upper entries uniform in `[−eps, eps]`.
pub fn random_skew(rng: &mut impl Rng, m: usize, eps: f64) -> Matrix {
    let mut s = Matrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let a = if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 };
            s[(i, j)] = a;
            s[(j, i)] = -a;
        }
    }
    s
}

/// Orthogonal `I + E` with `E = O(eps)` entrywise, via a Cayley transform.
pub fn near_identity_rotation(rng: &mut impl Rng, m: usize, eps: f64) -> Result<Matrix> {
    cayley_near_identity(&random_skew(rng, m, eps), m)
}

/// `U_full · P · Σ*(m x n) · Qᵀ · V_fullᵀ`.
pub fn spectral_perturbation(
    u_full: &Matrix,
    v_full: &Matrix,
    p: &Matrix,
    q: &Matrix,
    sigma_star: &[f64],
) -> Matrix {
    let (m, n) = (u_full.rows(), v_full.rows());
    let left = u_full.matmul(p);
    let right = v_full.matmul(q);
    let mut scaled = left.leading_columns(sigma_star.len().min(m));
    for i in 0..m {
        for (j, s) in sigma_star.iter().enumerate().take(scaled.cols()) {
            scaled[(i, j)] *= s;
        }
    }
    let right_k = right.leading_columns(scaled.cols());
    debug_assert_eq!(right_k.rows(), n);
    scaled.matmul_t(&right_k)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Synthesized {
    pub w_star: Matrix,
    /// `max |P − I|` entrywise.
    pub max_ep: f64,
    /// `max |Q − I|` entrywise.
    pub max_eq: f64,
}

/// Builds `W*` from `w0`'s SVD with `P`, `Q` Cayley transforms of skew
/// matrices whose entries are uniform in `[−eps, eps]`.
pub fn synthesize_finetuned(w0: &Matrix, eps: f64, sigma_star: &[f64], seed: u64) -> Result<Synthesized> {
    let (m, n) = w0.shape();
    let k = m.min(n);
    if sigma_star.len() != k {
        return Err(Error::mismatch("synthesize_finetuned", format!("{k} singular values"), sigma_star.len()));
    }
    if sigma_star.windows(2).any(|w| w[0] < w[1]) || sigma_star.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidArgument(
            "sigma_star must be finite, non-negative and sorted non-increasing".into(),
        ));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps = {eps}")));
    }
    let f = svd(w0)?;
    let u_full = complete_orthonormal_basis(&f.u);
    let v_full = complete_orthonormal_basis(&f.v);
    let mut rng = rng::seeded(seed);
    let p = near_identity_rotation(&mut rng, m, eps)?;
    let q = near_identity_rotation(&mut rng, n, eps)?;
    let max_ep = (&p - &Matrix::identity(m)).max_abs();
    let max_eq = (&q - &Matrix::identity(n)).max_abs();
    Ok(Synthesized {
        w_star: spectral_perturbation(&u_full, &v_full, &p, &q, sigma_star),
        max_ep,
        max_eq,
    })
}
