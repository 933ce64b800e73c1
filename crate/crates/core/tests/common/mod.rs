//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use pica_core::linalg::{svd, truncate};
use pica_core::net::{GradientSet, ToyModel};
use pica_core::optim::Hyper;
use pica_core::Matrix;

/// Trains `W = W0 + U_r B` by plain Adam on `B`, written without reference
/// to the optimizer under test. `slot_of[layer]` names the `B` a layer
/// uses; `mean` divides a slot's gradient by its layer count.
pub struct ReparamAdam {
    pub bases: Vec<Matrix>,
    pub slot_of: Vec<usize>,
    pub b: Vec<Matrix>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
    mean: bool,
}

impl ReparamAdam {
    /// Column-space bases from the SVD of each base weight.
    pub fn new(model: &ToyModel, rank: usize, slot_of: Vec<usize>, mean: bool) -> Self {
        let bases = model
            .layers()
            .iter()
            .map(|l| truncate(&svd(&l.base_weight).unwrap(), rank).unwrap().projector.basis().clone())
            .collect();
        Self::with_bases(model, rank, bases, slot_of, mean)
    }

    pub fn with_bases(model: &ToyModel, rank: usize, bases: Vec<Matrix>, slot_of: Vec<usize>, mean: bool) -> Self {
        let slots = slot_of.iter().max().map_or(0, |s| s + 1);
        let n: Vec<usize> = (0..slots)
            .map(|s| model.layers()[slot_of.iter().position(|&x| x == s).unwrap()].in_dim())
            .collect();
        let zeros = || n.iter().map(|&n| Matrix::zeros(rank, n)).collect::<Vec<_>>();
        Self {
            bases,
            slot_of,
            b: zeros(),
            m: zeros(),
            v: zeros(),
            t: 0,
            mean,
        }
    }

    pub fn weights(&self, model: &ToyModel) -> Vec<Matrix> {
        model
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| &l.base_weight + &self.bases[i].matmul(&self.b[self.slot_of[i]]))
            .collect()
    }

    /// One Adam step on every `B`, descending the loss whose weight
    /// gradients are `grads`.
    pub fn step(&mut self, grads: &GradientSet, h: &Hyper) {
        self.t += 1;
        for s in 0..self.b.len() {
            let members: Vec<usize> = (0..self.slot_of.len()).filter(|&i| self.slot_of[i] == s).collect();
            let (r, n) = self.b[s].shape();
            let mut g = Matrix::zeros(r, n);
            for &i in &members {
                g.axpy(1.0, &self.bases[i].t_matmul(&grads.layers()[i]));
            }
            if self.mean {
                g = g.scale(1.0 / members.len() as f64);
            }
            let c1 = 1.0 - h.beta1.powi(self.t);
            let c2 = 1.0 - h.beta2.powi(self.t);
            for k in 0..r * n {
                let gk = g.as_slice()[k];
                let m = h.beta1 * self.m[s].as_slice()[k] + (1.0 - h.beta1) * gk;
                let v = h.beta2 * self.v[s].as_slice()[k] + (1.0 - h.beta2) * gk * gk;
                self.m[s].as_mut_slice()[k] = m;
                self.v[s].as_mut_slice()[k] = v;
                self.b[s].as_mut_slice()[k] -= h.eta * (m / c1) / ((v / c2).sqrt() + h.eps_adam);
            }
        }
    }
}

/// Slot index per layer: one slot per distinct group (first appearance
/// order), or one per layer.
pub fn slots_by_group(model: &ToyModel, shared: bool) -> Vec<usize> {
    if !shared {
        return (0..model.num_layers()).collect();
    }
    let mut seen: Vec<&str> = Vec::new();
    model
        .layers()
        .iter()
        .map(|l| match seen.iter().position(|g| *g == l.group) {
            Some(i) => i,
            None => {
                seen.push(&l.group);
                seen.len() - 1
            }
        })
        .collect()
}

/// Singular values of a 2x2 matrix in closed form, descending.
pub fn singular_values_2x2(a: &Matrix) -> [f64; 2] {
    let (p, q, r, s) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    let big = ((p + s).powi(2) + (r - q).powi(2)).sqrt();
    let small = ((p - s).powi(2) + (q + r).powi(2)).sqrt();
    let s1 = 0.5 * (big + small);
    let det = (p * s - q * r).abs();
    [s1, if s1 > 0.0 { det / s1 } else { 0.0 }]
}

/// Singular values of a 3x3 matrix from the characteristic polynomial
/// `λ³ − c2 λ² + c1 λ − c0` of `AᵀA`, with `c2 = ‖A‖_F²`, `c1` the sum of
/// squared 2x2 minors and `c0 = det(A)²`. Only the largest root is taken
/// from the cubic; the other two follow from `λ2 + λ3 = (c1 − c0/λ1)/λ1`
/// and `λ2 λ3 = c0/λ1`, which stay accurate when `A` is rank-deficient;
/// `σ3 = |det|/(σ1 σ2)` is capped at `σ2` for the same reason.
pub fn singular_values_3x3(a: &Matrix) -> [f64; 3] {
    let c2 = a.frobenius_norm_sq();
    let mut c1 = 0.0;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        for (k, l) in [(0, 1), (0, 2), (1, 2)] {
            c1 += (a[(i, k)] * a[(j, l)] - a[(i, l)] * a[(j, k)]).powi(2);
        }
    }
    let det = a[(0, 0)] * (a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)])
        - a[(0, 1)] * (a[(1, 0)] * a[(2, 2)] - a[(1, 2)] * a[(2, 0)])
        + a[(0, 2)] * (a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)]);
    let c0 = det * det;
    if c2 == 0.0 {
        return [0.0; 3];
    }
    let shift = c2 / 3.0;
    let p = c1 - c2 * c2 / 3.0;
    let q = -2.0 * c2.powi(3) / 27.0 + c2 * c1 / 3.0 - c0;
    let mut l1 = if p < 0.0 {
        let amp = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * amp)).clamp(-1.0, 1.0);
        shift + amp * (arg.acos() / 3.0).cos()
    } else {
        shift
    };
    for _ in 0..3 {
        let f = ((l1 - c2) * l1 + c1) * l1 - c0;
        let df = (3.0 * l1 - 2.0 * c2) * l1 + c1;
        if df > 0.0 {
            l1 -= f / df;
        }
    }
    let prod = c0 / l1;
    let sum = ((c1 - prod) / l1).max(0.0);
    let l2 = 0.5 * (sum + (sum * sum - 4.0 * prod).max(0.0).sqrt());
    let s1 = l1.sqrt();
    let s2 = l2.sqrt();
    let s3 = if s2 > 0.0 { (det.abs() / (s1 * s2)).min(s2) } else { 0.0 };
    [s1, s2, s3]
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn power_iteration_top(a: &Matrix, iters: usize) -> f64 {
    let mut x = Matrix::from_fn(a.cols(), 1, |i, _| 1.0 + i as f64 * 0.01);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let y = a.t_matmul(&a.matmul(&x));
        let norm = y.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        x = y.scale(1.0 / norm);
        sigma = a.matmul(&x).frobenius_norm();
    }
    sigma
}
