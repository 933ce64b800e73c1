//! Adam with column-space gradient projection and per-group shared state.
//!
//! Every adapted layer `i` of functional group `f` gets a fixed projector
//! `P^{f,i} = U_r^{f,i}`, the top-`r` left singular vectors of its base
//! weight. Each step projects the negative layer gradients into the `r x n`
//! compact space, sums them over the group, runs Adam there on one shared
//! `B^f`, and decompresses the update through every layer's own projector.
//! The effective weight of a layer is always `W0 + U_r B^f`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_orthonormal, svd, truncate, Matrix, Projector};
use crate::net::{GradientSet, ToyModel};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub rank: usize,
    pub eta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps_adam: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Hyper {
    pub fn new(rank: usize, eta: f64) -> Self {
        Self {
            rank,
            eta,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps_adam: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("{what} = {v}")));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", self.eta);
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", self.beta1);
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", self.beta2);
        }
        if !(self.eps_adam > 0.0 && self.eps_adam.is_finite()) {
            return bad("eps_adam", self.eps_adam);
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamMoments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }

    /// Folds `g` into the moments and returns `m̂ ⊘ (√v̂ + ε)` for step `t ≥ 1`.
    pub fn direction(&mut self, g: &Matrix, t: u64, hyper: &Hyper) -> Matrix {
        let (b1, b2) = (hyper.beta1, hyper.beta2);
        for ((m, v), &gi) in self
            .m
            .as_mut_slice()
            .iter_mut()
            .zip(self.v.as_mut_slice())
            .zip(g.as_slice())
        {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * (gi * gi);
        }
        let exp = i32::try_from(t).unwrap_or(i32::MAX);
        let c1 = 1.0 - b1.powi(exp);
        let c2 = 1.0 - b2.powi(exp);
        self.m
            .zip_map(&self.v, |m, v| (m / c1) / ((v / c2).sqrt() + hyper.eps_adam))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    Adam,
    /// `B ← B + η R`: projected gradient descent without moments.
    PlainGd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// One `B^f` per functional group.
    #[default]
    Shared,
    /// One `B` per layer.
    PerLayer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectorSource {
    /// Top-`r` left singular vectors of the base weight.
    #[default]
    ColumnSpace,
    /// Seeded random orthonormal basis per layer.
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PicaOptions {
    pub rule: UpdateRule,
    pub sharing: Sharing,
    pub source: ProjectorSource,
    pub aggregation: Aggregation,
}

/// Compact trainable matrix and its Adam moments, all `r x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupState {
    pub b: Matrix,
    pub moments: AdamMoments,
}

impl GroupState {
    fn zeros(r: usize, n: usize) -> Self {
        Self {
            b: Matrix::zeros(r, n),
            moments: AdamMoments::zeros(r, n),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PicaState {
    /// `(slot id, state)`; slot id is the group id, or `group/layer` when
    /// sharing is off.
    slots: Vec<(String, GroupState)>,
    layer_slot: Vec<usize>,
    projectors: Vec<Projector>,
    t: u64,
    rank: usize,
    options: PicaOptions,
}

/// Seed of the random projector for `layer` under `ProjectorSource::Random`.
pub fn random_projector_seed(seed: u64, layer: usize) -> u64 {
    rng::derive_seed(seed, 0x5052_4f4a_0000_0000 | layer as u64)
}

/// Builds the projector of every layer of `model`.
pub fn build_projectors(model: &ToyModel, rank: usize, source: ProjectorSource) -> Result<Vec<Projector>> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let (m, n) = layer.base_weight.shape();
            let max = m.min(n);
            if rank == 0 || rank > max {
                return Err(Error::RankOutOfRange {
                    rank,
                    max,
                    context: Some(format!("layer {i} ({:?}, {m}x{n})", layer.group)),
                });
            }
            match source {
                ProjectorSource::ColumnSpace => Ok(truncate(&svd(&layer.base_weight)?, rank)?.projector),
                ProjectorSource::Random { seed } => random_orthonormal(m, rank, random_projector_seed(seed, i)),
            }
        })
        .collect()
}

fn slot_layout(model: &ToyModel, sharing: Sharing) -> (Vec<String>, Vec<usize>) {
    let mut names: Vec<String> = Vec::new();
    let mut layer_slot = Vec::with_capacity(model.num_layers());
    for (i, layer) in model.layers().iter().enumerate() {
        let name = match sharing {
            Sharing::Shared => layer.group.clone(),
            Sharing::PerLayer => format!("{}/{i}", layer.group),
        };
        let idx = match names.iter().position(|n| *n == name) {
            Some(idx) => idx,
            None => {
                names.push(name);
                names.len() - 1
            }
        };
        layer_slot.push(idx);
    }
    (names, layer_slot)
}

impl PicaState {
    /// Column-space projectors, shared state per group, Adam.
    pub fn init(model: &ToyModel, hyper: &Hyper) -> Result<Self> {
        Self::init_with(model, hyper, PicaOptions::default())
    }

    pub fn init_with(model: &ToyModel, hyper: &Hyper, options: PicaOptions) -> Result<Self> {
        hyper.validate()?;
        let projectors = build_projectors(model, hyper.rank, options.source)?;
        Ok(Self::from_projectors(model, hyper.rank, options, projectors))
    }

    pub(crate) fn from_projectors(
        model: &ToyModel,
        rank: usize,
        options: PicaOptions,
        projectors: Vec<Projector>,
    ) -> Self {
        let (names, layer_slot) = slot_layout(model, options.sharing);
        let slots = names
            .into_iter()
            .enumerate()
            .map(|(slot, name)| {
                let first = layer_slot.iter().position(|&s| s == slot).expect("slot has a layer");
                let n = model.layers()[first].in_dim();
                (name, GroupState::zeros(rank, n))
            })
            .collect();
        Self {
            slots,
            layer_slot,
            projectors,
            t: 0,
            rank,
            options,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub(crate) fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    pub fn options(&self) -> &PicaOptions {
        &self.options
    }

    pub fn num_layers(&self) -> usize {
        self.projectors.len()
    }

    pub fn projector(&self, layer: usize) -> Option<&Projector> {
        self.projectors.get(layer)
    }

    pub fn projectors(&self) -> &[Projector] {
        &self.projectors
    }

    /// Slot ids with their state, in layer order of first appearance.
    pub fn groups(&self) -> impl Iterator<Item = (&str, &GroupState)> {
        self.slots.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn group(&self, id: &str) -> Option<&GroupState> {
        self.slots.iter().find(|(n, _)| n == id).map(|(_, s)| s)
    }

    pub fn group_mut(&mut self, id: &str) -> Option<&mut GroupState> {
        self.slots.iter_mut().find(|(n, _)| n == id).map(|(_, s)| s)
    }

    /// Slot id driving `layer`.
    pub fn slot_of(&self, layer: usize) -> Option<&str> {
        self.layer_slot.get(layer).map(|&s| self.slots[s].0.as_str())
    }

    /// Layers driven by slot index `slot`.
    pub(crate) fn slot_layers(&self, slot: usize) -> Vec<usize> {
        (0..self.layer_slot.len()).filter(|&l| self.layer_slot[l] == slot).collect()
    }

    pub(crate) fn slots_mut(&mut self) -> &mut [(String, GroupState)] {
        &mut self.slots
    }

    /// Trainable parameters: `Σ_slots r·n`.
    pub fn trainable_params(&self) -> usize {
        self.slots.iter().map(|(_, s)| s.b.rows() * s.b.cols()).sum()
    }

    /// One optimizer step. Returns the weight increment of every layer,
    /// `η P^{f,i} ΔB^f`.
    pub fn step(&mut self, grads: &GradientSet, hyper: &Hyper) -> Result<Vec<Matrix>> {
        let layers = grads.layers();
        if layers.len() != self.projectors.len() {
            return Err(Error::mismatch("PicaState::step", format!("{} gradients", self.projectors.len()), layers.len()));
        }
        for (i, (g, p)) in layers.iter().zip(&self.projectors).enumerate() {
            let n = self.slots[self.layer_slot[i]].1.b.cols();
            if g.shape() != (p.dim(), n) {
                return Err(Error::mismatch(
                    "PicaState::step",
                    format!("layer {i} gradient {}x{n}", p.dim()),
                    format!("{}x{}", g.rows(), g.cols()),
                ));
            }
        }
        self.t += 1;
        let mut deltas: Vec<Option<Matrix>> = vec![None; layers.len()];
        for slot in 0..self.slots.len() {
            let members = self.slot_layers(slot);
            let state = &mut self.slots[slot].1;
            // R = Σ_i Pᵀ(−∇)
            let mut r = Matrix::zeros(state.b.rows(), state.b.cols());
            for &i in &members {
                r.axpy(-1.0, &self.projectors[i].compress(&layers[i]));
            }
            if self.options.aggregation == Aggregation::Mean {
                r = r.scale(1.0 / members.len() as f64);
            }
            let delta_b = match self.options.rule {
                UpdateRule::Adam => state.moments.direction(&r, self.t, hyper),
                UpdateRule::PlainGd => r,
            };
            let increment = delta_b.scale(hyper.eta);
            state.b += &increment;
            for &i in &members {
                deltas[i] = Some(self.projectors[i].lift(&increment));
            }
        }
        Ok(deltas.into_iter().map(|d| d.expect("every layer has a slot")).collect())
    }

    /// `W0 + U_r B` for `layer`.
    pub fn effective_weight(&self, model: &ToyModel, layer: usize) -> Result<Matrix> {
        let p = self.projectors.get(layer).ok_or(Error::UnknownLayer(layer))?;
        let spec = model.layers().get(layer).ok_or(Error::UnknownLayer(layer))?;
        let b = &self.slots[self.layer_slot[layer]].1.b;
        if spec.base_weight.shape() != (p.dim(), b.cols()) {
            return Err(Error::mismatch(
                "effective_weight",
                format!("{}x{}", p.dim(), b.cols()),
                format!("{:?}", spec.base_weight.shape()),
            ));
        }
        Ok(&spec.base_weight + &p.lift(b))
    }

    pub fn effective_weights(&self, model: &ToyModel) -> Result<Vec<Matrix>> {
        (0..self.projectors.len())
            .map(|l| self.effective_weight(model, l))
            .collect()
    }
}

/// Trainable parameter count: `Σ_f r·n_f` shared, `Σ_i r·n_i` per layer.
pub fn param_count(model: &ToyModel, rank: usize, sharing: Sharing) -> usize {
    match sharing {
        Sharing::Shared => model
            .groups()
            .iter()
            .map(|g| rank * model.layers()[model.layers_in_group(g)[0]].in_dim())
            .sum(),
        Sharing::PerLayer => model.layers().iter().map(|l| rank * l.in_dim()).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::net::{LayerSpec, LossKind, Nonlinearity};
    use crate::rng;

    fn model_of(layers: Vec<(&str, Matrix)>) -> ToyModel {
        ToyModel::new(
            layers.into_iter().map(|(g, w)| LayerSpec::new(g, w)).collect(),
            Nonlinearity::Identity,
            LossKind::MeanSquaredError,
        )
        .unwrap()
    }

    #[test]
    fn diagonal_base_gives_standard_basis_projector() {
        let model = model_of(vec![("q", Matrix::diag(&[3.0, 2.0, 1.0]))]);
        let st = PicaState::init(&model, &Hyper::new(2, 0.1)).unwrap();
        let expect = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(st.projector(0).unwrap().basis(), &expect);
        assert_eq!(st.step_count(), 0);
        assert_eq!(st.effective_weight(&model, 0).unwrap(), Matrix::diag(&[3.0, 2.0, 1.0]));
    }

    #[test]
    fn full_rank_projector_spans_column_space() {
        let w = rng::gaussian_matrix(&mut rng::seeded(1), 4, 4, 1.0);
        let model = model_of(vec![("q", w)]);
        let st = PicaState::init(&model, &Hyper::new(4, 0.1)).unwrap();
        let p = st.projector(0).unwrap();
        let x = rng::gaussian_matrix(&mut rng::seeded(2), 4, 3, 1.0);
        assert!(p.apply(&x).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn group_with_different_out_dims_shares_one_state() {
        let mut r = rng::seeded(3);
        // q: 5x4, v: 4x5, q: 6x4 — wiring 4→5→4→6
        let model = model_of(vec![
            ("q", rng::gaussian_matrix(&mut r, 5, 4, 1.0)),
            ("v", rng::gaussian_matrix(&mut r, 4, 5, 1.0)),
            ("q", rng::gaussian_matrix(&mut r, 6, 4, 1.0)),
        ]);
        let st = PicaState::init(&model, &Hyper::new(2, 0.1)).unwrap();
        assert_eq!(st.groups().count(), 2);
        assert_eq!(st.group("q").unwrap().b.shape(), (2, 4));
        assert_eq!(st.projector(0).unwrap().dim(), 5);
        assert_eq!(st.projector(2).unwrap().dim(), 6);
        assert_ne!(st.projector(0), st.projector(2));
    }

    #[test]
    fn rank_too_large_names_layer() {
        let model = model_of(vec![("q", Matrix::identity(3)), ("v", Matrix::zeros(2, 3))]);
        let err = PicaState::init(&model, &Hyper::new(3, 0.1)).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn zero_gradient_step_is_a_no_op() {
        let model = model_of(vec![("q", Matrix::diag(&[3.0, 2.0, 1.0]))]);
        let hyper = Hyper::new(2, 0.1);
        let mut st = PicaState::init(&model, &hyper).unwrap();
        let deltas = st.step(&GradientSet(vec![Matrix::zeros(3, 3)]), &hyper).unwrap();
        assert_eq!(deltas[0].max_abs(), 0.0);
        let g = st.group("q").unwrap();
        assert_eq!(g.b.max_abs() + g.moments.m.max_abs() + g.moments.v.max_abs(), 0.0);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_adam_step_is_sign_like() {
        let model = model_of(vec![("q", Matrix::diag(&[3.0, 2.0, 1.0]))]);
        let hyper = Hyper::new(2, 0.01);
        let mut st = PicaState::init(&model, &hyper).unwrap();
        let g = Matrix::from_rows(&[[0.5, -2.0, 1e-3], [-0.1, 0.3, 4.0], [9.0, 9.0, 9.0]]);
        st.step(&GradientSet(vec![g.clone()]), &hyper).unwrap();
        let b = &st.group("q").unwrap().b;
        // R = −(first two rows of g); ΔB = R/(|R| + ε) on the first step
        for i in 0..2 {
            for j in 0..3 {
                let r = -g[(i, j)];
                let expect = hyper.eta * r / (r.abs() + hyper.eps_adam);
                assert!((b[(i, j)] - expect).abs() < 1e-17);
            }
        }
        assert!((b.max_abs() - hyper.eta).abs() < 1e-7);
    }

    #[test]
    fn rejects_wrong_gradient_shapes() {
        let model = model_of(vec![("q", Matrix::identity(3))]);
        let hyper = Hyper::new(1, 0.1);
        let mut st = PicaState::init(&model, &hyper).unwrap();
        assert!(st.step(&GradientSet(vec![Matrix::zeros(2, 3)]), &hyper).is_err());
        assert!(st.step(&GradientSet(vec![]), &hyper).is_err());
        assert!(st.effective_weight(&model, 5).is_err());
    }

    #[test]
    fn param_counts() {
        let mk = |layers: usize| {
            let l: Vec<(&str, Matrix)> = (0..layers)
                .map(|i| (if i % 2 == 0 { "q" } else { "v" }, Matrix::identity(64)))
                .collect();
            model_of(l)
        };
        assert_eq!(param_count(&mk(2), 4, Sharing::Shared), 512);
        let big = mk(16);
        assert_eq!(param_count(&big, 4, Sharing::Shared), 512);
        assert_eq!(param_count(&big, 4, Sharing::PerLayer), 4096);
    }

    #[test]
    fn hyper_validation() {
        assert!(Hyper::new(1, 0.0).validate().is_err());
        let mut h = Hyper::new(1, 0.1);
        h.beta2 = 1.0;
        assert!(h.validate().is_err());
        assert!(Hyper::new(1, 0.1).validate().is_ok());
    }
}
