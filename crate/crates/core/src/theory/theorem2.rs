//! Sequential projection (project every gradient step) against accumulated
//! projection (project the summed gradient of the unprojected path once).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, truncate, Matrix, Projector};

/// Smooth quadratic losses with certifiable smoothness `L = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuadraticLoss {
    /// `½‖W − W̄‖_F²`.
    Isotropic,
    /// `½‖S (W − W̄)‖_F²` for a symmetric `S` with `‖S‖₂ ≤ 1`. The gradient
    /// `S²(W − W̄)` does not commute with the projector, so the two paths
    /// separate at second order in `η`.
    Coupled { s: Matrix },
}

impl QuadraticLoss {
    fn gradient(&self, w: &Matrix, target: &Matrix) -> Matrix {
        let diff = w - target;
        match self {
            QuadraticLoss::Isotropic => diff,
            QuadraticLoss::Coupled { s } => s.matmul(&s.matmul(&diff)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonPoint {
    pub t: usize,
    /// `‖W_T − P_T‖_F`.
    pub measured_diff: f64,
    /// `(η²/2)·L·G·T(T−1)`.
    pub bound: f64,
    /// `10·(ηLT)³·G`, the allowance for the third-order remainder.
    pub remainder: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub eta: f64,
    pub smoothness: f64,
    pub grad_bound: f64,
    pub rank: usize,
    pub points: Vec<HorizonPoint>,
    /// `η·T_max > 0.3`: the remainder is no longer subdominant.
    pub large_horizon: bool,
}

impl Theorem2Report {
    pub fn all_hold(&self) -> bool {
        self.points.iter().all(|p| p.holds)
    }

    /// Least-squares slope of `log(max(diff, floor))` against `log T` over
    /// horizons in `[lo, hi]`.
    pub fn growth_slope(&self, lo: usize, hi: usize, floor: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.t >= lo && p.t <= hi)
            .map(|p| ((p.t as f64).ln(), p.measured_diff.max(floor).ln()))
            .collect();
        log_log_slope(&pts)
    }
}

pub(crate) fn log_log_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Runs both paths from `w0` toward `target` for `t_max` steps with the
/// rank-`r` column-space projector of `w0`.
pub fn check_theorem2(
    w0: &Matrix,
    r: usize,
    eta: f64,
    t_max: usize,
    target: &Matrix,
    loss: &QuadraticLoss,
) -> Result<Theorem2Report> {
    if w0.shape() != target.shape() {
        return Err(Error::mismatch(
            "check_theorem2",
            format!("{:?}", w0.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "eta = {eta}: the gradient bound needs a contracting path (0 < eta <= 1)"
        )));
    }
    if let QuadraticLoss::Coupled { s } = loss {
        if s.shape() != (w0.rows(), w0.rows()) || (s - &s.transpose()).max_abs() > 0.0 {
            return Err(Error::InvalidArgument("coupling matrix must be symmetric m x m".into()));
        }
        if crate::linalg::spectral_norm(s)? > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument("coupling matrix must have spectral norm <= 1".into()));
        }
    }
    let proj: Projector = truncate(&svd(w0)?, r)?.projector;
    let project = |x: &Matrix| proj.lift(&proj.compress(x));

    let smoothness = 1.0;
    let grad_bound = loss.gradient(w0, target).frobenius_norm();

    let mut z = w0.clone();
    let mut p = w0.clone();
    let mut grad_sum = Matrix::zeros(w0.rows(), w0.cols());
    let mut points = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        let w_t = w0 - &project(&grad_sum).scale(eta);
        let measured_diff = (&w_t - &p).frobenius_norm();
        let tf = t as f64;
        let bound = 0.5 * eta * eta * smoothness * grad_bound * tf * (tf - 1.0).max(0.0);
        let remainder = 10.0 * (eta * smoothness * tf).powi(3) * grad_bound;
        points.push(HorizonPoint {
            t,
            measured_diff,
            bound,
            remainder,
            holds: measured_diff <= bound + remainder,
        });
        if t == t_max {
            break;
        }
        let gz = loss.gradient(&z, target);
        grad_sum += &gz;
        z.axpy(-eta, &gz);
        let gp = loss.gradient(&p, target);
        p = &p - &project(&gp).scale(eta);
    }
    Ok(Theorem2Report {
        eta,
        smoothness,
        grad_bound,
        rank: r,
        points,
        large_horizon: eta * t_max as f64 > 0.3,
    })
}
