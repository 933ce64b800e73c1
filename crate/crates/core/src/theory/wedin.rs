//! Angle between the top-r left singular subspaces of a matrix and its
//! perturbation, against `‖ΔW‖_F / δ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sin_theta, svd, truncate, Matrix};

/// Resolution of `sin Θ` computed from bases that are orthonormal to
/// `r·1e-12`.
fn resolution(r: usize) -> f64 {
    r as f64 * 1e-12
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WedinReport {
    pub rank: usize,
    /// Frobenius `sin Θ` between the two top-r left subspaces.
    pub sin_theta: f64,
    /// `‖ΔW‖_F / δ`, infinite when the gap is degenerate.
    pub bound: f64,
    /// `min(σ_r(W0) − σ_{r+1}(W*), σ_r(W*) − σ_{r+1}(W0))`.
    pub gap: f64,
    /// `δ <= 0`: no claim is made.
    pub gap_degenerate: bool,
    pub holds: bool,
}

/// Evaluates the sin-Θ bound for the top-`r` left subspaces of `w0` and
/// `w_star`.
pub fn check_wedin(w0: &Matrix, w_star: &Matrix, r: usize) -> Result<WedinReport> {
    if w0.shape() != w_star.shape() {
        return Err(Error::mismatch(
            "check_wedin",
            format!("{:?}", w0.shape()),
            format!("{:?}", w_star.shape()),
        ));
    }
    let a = svd(w0)?;
    let b = svd(w_star)?;
    let next = |s: &[f64]| s.get(r).copied().unwrap_or(0.0);
    let pa = truncate(&a, r)?;
    let pb = truncate(&b, r)?;
    let gap = (a.s[r - 1] - next(&b.s)).min(b.s[r - 1] - next(&a.s));
    let sin = sin_theta(&pa.projector, &pb.projector)?;
    let norm = (w_star - w0).frobenius_norm();
    let gap_degenerate = !(gap > 0.0);
    let bound = if gap_degenerate { f64::INFINITY } else { norm / gap };
    Ok(WedinReport {
        rank: r,
        sin_theta: sin,
        bound,
        gap,
        gap_degenerate,
        holds: gap_degenerate || sin <= bound + resolution(r),
    })
}
