//! Projection error of a fine-tuning update onto the base weight's top-r
//! left singular subspace, compared against the entrywise-stage and final
//! bounds with explicit constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{singular_values, svd, tail_energy_of, truncate, Matrix};

/// Absolute slack for comparing a measured quantity against a bound, in
/// units of `‖ΔW‖_F²`. Covers rounding in `lhs` when the bound is tight.
const ROUNDING_SLACK: f64 = 64.0 * f64::EPSILON;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub eps: f64,
    /// `‖ΔW − Π ΔW‖_F²`.
    pub lhs: f64,
    /// `‖Π ΔW‖_F²`.
    pub projected: f64,
    /// `‖ΔW‖_F²`.
    pub total: f64,
    /// `Σ_{i>r} σ_i²(ΔW)`.
    pub tail: f64,
    /// `Σ_{i>r} (σ_i(W*) − σ_i(W0))²`.
    pub spectral_shift: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub intermediate_rhs: f64,
    pub final_rhs: f64,
    pub holds_intermediate: bool,
    pub holds_final: bool,
}

impl Theorem1Report {
    /// `|lhs + ‖ΠΔW‖² − ‖ΔW‖²| / max(‖ΔW‖², tiny)`.
    pub fn pythagoras_error(&self) -> f64 {
        let scale = self.total.max(f64::MIN_POSITIVE);
        (self.lhs + self.projected - self.total).abs() / scale
    }

    /// `C = C1 + εC2 + εC3 + C4 + εC5`.
    pub fn combined_constant(&self) -> f64 {
        self.c1 + self.eps * (self.c2 + self.c3) + self.c4 + self.eps * self.c5
    }

    pub fn intermediate_margin(&self) -> f64 {
        self.intermediate_rhs - self.lhs
    }

    pub fn final_margin(&self) -> f64 {
        self.final_rhs - self.lhs
    }
}

/// Constants `C1..C5` for shape `m x n`, rank `r`, entrywise bound `eps`.
///
/// `sigma_star` and `sigma_base` are the singular values of `W*` and `W0`
/// (length `min(m, n)`), `sigma_delta` those of `ΔW`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Constants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

pub fn constants(
    (m, n): (usize, usize),
    r: usize,
    eps: f64,
    sigma_star: &[f64],
    sigma_base: &[f64],
    sigma_delta: &[f64],
) -> Constants {
    let l = m.min(n);
    let lf = l as f64;
    let smax = sigma_star.first().copied().unwrap_or(0.0);
    let star = |i: usize| sigma_star.get(i).copied().unwrap_or(0.0);

    let mut c1 = 0.0;
    let mut c2 = 0.0;
    for i in r..l {
        let d = (sigma_star[i] - sigma_base[i]).abs();
        c1 += 2.0 * d * (2.0 * sigma_star[i] + eps * lf * smax);
        c2 += 3.0 * (2.0 * sigma_star[i].powi(2) + eps * eps * lf * lf * smax * smax);
    }

    // Off-diagonal entries of rows r+1..m: singular values beyond min(m, n)
    // are zero.
    let e3 = eps * eps * lf * lf * smax * smax;
    let col_sq: f64 = (0..n).map(|j| star(j).powi(2)).sum();
    let mut c3 = 0.0;
    for i in r..m {
        let si = star(i).powi(2);
        let (others_sq, count) = if i < n {
            (col_sq - star(i).powi(2), n - 1)
        } else {
            (col_sq, n)
        };
        c3 += 3.0 * (others_sq + count as f64 * (si + e3));
    }

    let mn = (m * n) as f64;
    let e_tot = 2.0 * mn.sqrt() * smax + mn * eps * smax;
    let tail_sum: f64 = sigma_delta.iter().skip(r).take(l - r).sum();
    let c4 = 2.0 * e_tot * tail_sum;
    let c5 = (l - r) as f64 * e_tot * e_tot;
    Constants { c1, c2, c3, c4, c5 }
}

/// Measures the projection error of `ΔW = W* − W0` onto the top-`r` left
/// singular subspace of `w0` and evaluates both bounds at `eps`.
pub fn check_theorem1(w0: &Matrix, w_star: &Matrix, r: usize, eps: f64) -> Result<Theorem1Report> {
    if w0.shape() != w_star.shape() {
        return Err(Error::mismatch(
            "check_theorem1",
            format!("{:?}", w0.shape()),
            format!("{:?}", w_star.shape()),
        ));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps = {eps}")));
    }
    let (m, n) = w0.shape();
    let base = svd(w0)?;
    let proj = truncate(&base, r)?.projector;
    let delta = w_star - w0;
    let residual = proj.residual(&delta)?;
    let lhs = residual.frobenius_norm_sq();
    let projected = proj.lift(&proj.compress(&delta)).frobenius_norm_sq();
    let total = delta.frobenius_norm_sq();

    let sigma_star = singular_values(w_star)?;
    let sigma_delta = singular_values(&delta)?;
    let tail = tail_energy_of(&sigma_delta, r)?;
    let spectral_shift: f64 = sigma_star
        .iter()
        .zip(&base.s)
        .skip(r)
        .map(|(a, b)| (a - b).powi(2))
        .sum();

    let c = constants((m, n), r, eps, &sigma_star, &base.s, &sigma_delta);
    let intermediate_rhs = spectral_shift + eps * c.c1 + eps * eps * (c.c2 + c.c3);
    let combined = c.c1 + eps * (c.c2 + c.c3) + c.c4 + eps * c.c5;
    let final_rhs = tail + eps * combined;
    let slack = ROUNDING_SLACK * total;

    Ok(Theorem1Report {
        m,
        n,
        rank: r,
        eps,
        lhs,
        projected,
        total,
        tail,
        spectral_shift,
        c1: c.c1,
        c2: c.c2,
        c3: c.c3,
        c4: c.c4,
        c5: c.c5,
        intermediate_rhs,
        final_rhs,
        holds_intermediate: lhs <= intermediate_rhs + slack,
        holds_final: lhs <= final_rhs + slack,
    })
}
