//! Teacher-student fine-tuning tasks with a known optimum.
//!
//! A student network starts at pre-trained weights `W0`; data is generated
//! by a teacher network whose weights `W*` are a controlled perturbation of
//! `W0`. Base weights are built per functional group as
//! `W0^{f,i} = U^i diag(σ^f) (V^f)ᵀ`: every layer of a group shares its right
//! singular vectors and spectrum and has its own left singular vectors, so
//! group-level perturbations are expressible by one shared compact matrix.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_orthonormal, svd, truncate, Matrix};
use crate::net::{self, softmax_columns, Batch, LayerSpec, LossKind, Nonlinearity, ToyModel};
use crate::rng;
use crate::theory::synth::{near_identity_rotation, spectral_perturbation};

/// How the teacher's weights `W*` depart from `W0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    /// `ΔW^{f,i} = U_r^{f,i} C^f`, `C^f` Gaussian `r x n` with entry std `scale/√n`.
    InColumnSpace { rank: usize, scale: f64 },
    /// `W* = (U P) Σ* (V Q)ᵀ`, `P`, `Q` Cayley rotations with skew entries in
    /// `[−eps, eps]`, `Σ* = (1 + sigma_shift) Σ`.
    Theorem1Form { eps: f64, sigma_shift: f64 },
    /// Gaussian `ΔW` with entry std `scale/√n`.
    Unstructured { scale: f64 },
}

/// Geometric base spectrum `σ_j = top · decay^j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spectrum {
    pub top: f64,
    pub decay: f64,
}

impl Default for Spectrum {
    fn default() -> Self {
        Self { top: 3.0, decay: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Layer widths `d_0, d_1, …, d_L`; layer `l` maps `d_l → d_{l+1}`.
    pub dims: Vec<usize>,
    /// Group id per layer, `dims.len() − 1` entries.
    pub groups: Vec<String>,
    pub nonlinearity: Nonlinearity,
    pub loss: LossKind,
    pub perturbation: Perturbation,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Gaussian noise std added to teacher outputs (MSE only).
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Draw a fresh batch every step instead of reusing one fixed batch.
    #[serde(default = "default_streamed")]
    pub streamed: bool,
    #[serde(default)]
    pub spectrum: Spectrum,
}

fn default_batch() -> usize {
    64
}
fn default_noise() -> f64 {
    0.01
}
fn default_streamed() -> bool {
    true
}

impl TaskSpec {
    /// Four 32x32 layers alternating groups `q`, `v`, tanh, MSE.
    pub fn default_toy(perturbation: Perturbation) -> Self {
        Self::uniform(32, &["q", "v", "q", "v"], perturbation)
    }

    /// Square `width x width` layers with the given groups.
    pub fn uniform(width: usize, groups: &[&str], perturbation: Perturbation) -> Self {
        Self {
            dims: vec![width; groups.len() + 1],
            groups: groups.iter().map(|g| g.to_string()).collect(),
            nonlinearity: Nonlinearity::Tanh,
            loss: LossKind::MeanSquaredError,
            perturbation,
            batch_size: default_batch(),
            noise_std: default_noise(),
            streamed: default_streamed(),
            spectrum: Spectrum::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "dims must list at least two positive widths, got {:?}",
                self.dims
            )));
        }
        if self.groups.len() != self.dims.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} layers need {} group ids, got {}",
                self.dims.len() - 1,
                self.dims.len() - 1,
                self.groups.len()
            )));
        }
        // A group shares one right factor, so its layers share an input width.
        let mut widths: HashMap<&str, usize> = HashMap::new();
        for (l, g) in self.groups.iter().enumerate() {
            let n = *widths.entry(g).or_insert(self.dims[l]);
            if n != self.dims[l] {
                return Err(Error::InvalidArgument(format!(
                    "group {g:?}: layer {l} has input width {}, earlier layers {n}",
                    self.dims[l]
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std = {}", self.noise_std)));
        }
        if !(self.spectrum.top > 0.0 && self.spectrum.decay > 0.0 && self.spectrum.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("spectrum {:?}", self.spectrum)));
        }
        match self.perturbation {
            Perturbation::InColumnSpace { rank, scale } => {
                let max = (0..self.groups.len())
                    .map(|l| self.dims[l].min(self.dims[l + 1]))
                    .min()
                    .unwrap_or(0);
                if rank == 0 || rank > max {
                    return Err(Error::RankOutOfRange {
                        rank,
                        max,
                        context: Some("in_column_space perturbation".into()),
                    });
                }
                check_non_negative("scale", scale)
            }
            Perturbation::Theorem1Form { eps, sigma_shift } => {
                check_non_negative("eps", eps)?;
                check_non_negative("sigma_shift", sigma_shift)
            }
            Perturbation::Unstructured { scale } => check_non_negative("scale", scale),
        }
    }
}

fn check_non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v}")))
    }
}

/// A generated task: the student model at `W0`, the teacher weights, and a
/// seeded data stream.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub seed: u64,
    pub model: ToyModel,
    pub teacher: Vec<Matrix>,
    /// Achieved `max|E^P|`, `max|E^Q|` over layers for `Theorem1Form`.
    pub achieved_eps: Option<(f64, f64)>,
}

const STREAM_BASE: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_PERTURB: u64 = 3;

impl SyntheticTask {
    pub fn generate(seed: u64, spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let n_layers = spec.groups.len();
        let mut base_rng = rng::seeded(rng::derive_seed(seed, STREAM_BASE));

        // Per-group right factors and spectrum, per-layer left factors.
        let mut group_right: HashMap<String, Matrix> = HashMap::new();
        let mut u_full = Vec::with_capacity(n_layers);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (n, m) = (spec.dims[l], spec.dims[l + 1]);
            let group = &spec.groups[l];
            let v = group_right
                .entry(group.clone())
                .or_insert_with(|| {
                    random_orthonormal(n, n, base_rng_seed(&mut base_rng))
                        .expect("n >= 1")
                        .basis()
                        .clone()
                })
                .clone();
            let mut u = random_orthonormal(m, m, base_rng_seed(&mut base_rng))?.basis().clone();
            normalize_column_signs(&mut u);
            let k = m.min(n);
            let sigma: Vec<f64> = (0..k)
                .map(|j| spec.spectrum.top * spec.spectrum.decay.powi(j as i32))
                .collect();
            let w0 = spectral_perturbation(&u, &v, &Matrix::identity(m), &Matrix::identity(n), &sigma);
            u_full.push(u);
            layers.push(LayerSpec::new(group.clone(), w0));
        }
        let model = ToyModel::new(layers, spec.nonlinearity, spec.loss)?;

        let mut prng = rng::seeded(rng::derive_seed(seed, STREAM_PERTURB));
        let mut achieved_eps = None;
        let teacher = match spec.perturbation {
            Perturbation::Unstructured { scale } => model
                .layers()
                .iter()
                .map(|l| {
                    let std = scale / (l.in_dim() as f64).sqrt();
                    &l.base_weight + &rng::gaussian_matrix(&mut prng, l.out_dim(), l.in_dim(), std)
                })
                .collect(),
            Perturbation::InColumnSpace { rank, scale } => {
                let mut coeffs: HashMap<String, Matrix> = HashMap::new();
                let mut out = Vec::with_capacity(n_layers);
                for l in model.layers() {
                    let n = l.in_dim();
                    let c = coeffs
                        .entry(l.group.clone())
                        .or_insert_with(|| rng::gaussian_matrix(&mut prng, rank, n, scale / (n as f64).sqrt()))
                        .clone();
                    let basis = truncate(&svd(&l.base_weight)?, rank)?.projector;
                    out.push(&l.base_weight + &basis.lift(&c));
                }
                out
            }
            Perturbation::Theorem1Form { eps, sigma_shift } => {
                let mut lefts: HashMap<(String, usize), Matrix> = HashMap::new();
                let mut rights: HashMap<String, Matrix> = HashMap::new();
                let (mut max_ep, mut max_eq) = (0.0_f64, 0.0_f64);
                let mut out = Vec::with_capacity(n_layers);
                for (l, layer) in model.layers().iter().enumerate() {
                    let (m, n) = (layer.out_dim(), layer.in_dim());
                    let key = (layer.group.clone(), m);
                    if !lefts.contains_key(&key) {
                        lefts.insert(key.clone(), near_identity_rotation(&mut prng, m, eps)?);
                    }
                    if !rights.contains_key(&layer.group) {
                        rights.insert(layer.group.clone(), near_identity_rotation(&mut prng, n, eps)?);
                    }
                    let p = &lefts[&key];
                    let q = &rights[&layer.group];
                    max_ep = max_ep.max((p - &Matrix::identity(m)).max_abs());
                    max_eq = max_eq.max((q - &Matrix::identity(n)).max_abs());
                    let sigma_star: Vec<f64> = (0..m.min(n))
                        .map(|j| (1.0 + sigma_shift) * spec.spectrum.top * spec.spectrum.decay.powi(j as i32))
                        .collect();
                    out.push(spectral_perturbation(&u_full[l], &group_right[&layer.group], p, q, &sigma_star));
                }
                achieved_eps = Some((max_ep, max_eq));
                out
            }
        };

        Ok(Self {
            spec,
            seed,
            model,
            teacher,
            achieved_eps,
        })
    }

    /// Batch number `index` of the data stream.
    pub fn batch(&self, index: u64) -> Batch {
        self.make_batch(rng::derive_seed(self.seed, 1000 + index))
    }

    /// The batch used at training step `step`: a fresh one per step when
    /// streamed, batch 0 otherwise.
    pub fn train_batch(&self, step: u64) -> Batch {
        if self.spec.streamed {
            self.batch(step)
        } else {
            self.batch(0)
        }
    }

    /// Held-out batch used for reported losses.
    pub fn eval_batch(&self) -> Batch {
        self.make_batch(rng::derive_seed(self.seed, STREAM_EVAL))
    }

    fn make_batch(&self, seed: u64) -> Batch {
        let mut r = rng::seeded(seed);
        let inputs = rng::gaussian_matrix(&mut r, self.model.input_dim(), self.spec.batch_size, 1.0);
        let out = net::predict(&self.model, &self.teacher, &inputs).expect("teacher shapes match model");
        let targets = match self.spec.loss {
            LossKind::MeanSquaredError => {
                if self.spec.noise_std > 0.0 {
                    &out + &rng::gaussian_matrix(&mut r, out.rows(), out.cols(), self.spec.noise_std)
                } else {
                    out
                }
            }
            LossKind::SoftmaxCrossEntropy => softmax_columns(&out),
        };
        Batch { inputs, targets }
    }

    /// `Σ_l ‖W_l − W*_l‖_F`.
    pub fn distance_to_teacher(&self, weights: &[Matrix]) -> f64 {
        weights
            .iter()
            .zip(&self.teacher)
            .map(|(w, t)| (w - t).frobenius_norm())
            .sum()
    }
}

fn base_rng_seed(r: &mut rng::SeededRng) -> u64 {
    use rand::Rng;
    r.random()
}

/// Flips columns so the largest-magnitude entry of each is non-negative,
/// matching the SVD sign convention.
fn normalize_column_signs(u: &mut Matrix) {
    for j in 0..u.cols() {
        let mut best = 0;
        for i in 0..u.rows() {
            if u[(i, j)].abs() > u[(best, j)].abs() {
                best = i;
            }
        }
        if u[(best, j)] < 0.0 {
            for i in 0..u.rows() {
                u[(i, j)] = -u[(i, j)];
            }
        }
    }
}
