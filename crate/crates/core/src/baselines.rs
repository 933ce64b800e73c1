//! Comparison methods for the ablations: LoRA (optionally with `B` shared
//! per group), full fine-tuning, random-subspace PiCa and PiCa without
//! weight-sharing.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{GradientSet, ToyModel};
use crate::optim::{AdamMoments, Hyper, PicaOptions, PicaState, ProjectorSource, Sharing};
use crate::rng;

/// PiCa with seeded random orthonormal projectors instead of singular vectors.
pub fn random_pica_init(model: &ToyModel, hyper: &Hyper, seed: u64) -> Result<PicaState> {
    PicaState::init_with(
        model,
        hyper,
        PicaOptions {
            source: ProjectorSource::Random { seed },
            ..PicaOptions::default()
        },
    )
}

/// PiCa with one compact state per layer.
pub fn no_sharing_pica_init(model: &ToyModel, hyper: &Hyper) -> Result<PicaState> {
    PicaState::init_with(
        model,
        hyper,
        PicaOptions {
            sharing: Sharing::PerLayer,
            ..PicaOptions::default()
        },
    )
}

fn check_grads(op: &'static str, grads: &GradientSet, shapes: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    let shapes: Vec<_> = shapes.collect();
    if grads.layers().len() != shapes.len() {
        return Err(Error::mismatch(op, format!("{} gradients", shapes.len()), grads.layers().len()));
    }
    for (i, (g, s)) in grads.layers().iter().zip(&shapes).enumerate() {
        if g.shape() != *s {
            return Err(Error::mismatch(op, format!("layer {i} {s:?}"), format!("{:?}", g.shape())));
        }
    }
    Ok(())
}

/// LoRA: `W = W0 + A B`, `A` (`m x r`) Gaussian with std `1/√r`, `B`
/// (`r x n`) zero. Scaling `α/r` is fixed to 1.
#[derive(Clone, Debug)]
pub struct LoraState {
    a: Vec<Matrix>,
    a_moments: Vec<AdamMoments>,
    /// One per layer, or one per group when `shared_b`.
    b: Vec<Matrix>,
    b_moments: Vec<AdamMoments>,
    layer_slot: Vec<usize>,
    base: Vec<Matrix>,
    t: u64,
    rank: usize,
    shared_b: bool,
}

impl LoraState {
    pub fn init(model: &ToyModel, rank: usize, seed: u64, shared_b: bool) -> Result<Self> {
        let mut r = rng::seeded(rng::derive_seed(seed, 0x4c4f_5241));
        let mut a = Vec::new();
        let mut layer_slot = Vec::new();
        let mut b = Vec::new();
        let groups = model.groups();
        for (i, layer) in model.layers().iter().enumerate() {
            let (m, n) = layer.base_weight.shape();
            let max = m.min(n);
            if rank == 0 || rank > max {
                return Err(Error::RankOutOfRange {
                    rank,
                    max,
                    context: Some(format!("LoRA layer {i}")),
                });
            }
            a.push(rng::gaussian_matrix(&mut r, m, rank, 1.0 / (rank as f64).sqrt()));
            if shared_b {
                let slot = groups.iter().position(|g| *g == layer.group).expect("group listed");
                if slot == b.len() {
                    b.push(Matrix::zeros(rank, n));
                }
                layer_slot.push(slot);
            } else {
                b.push(Matrix::zeros(rank, n));
                layer_slot.push(i);
            }
        }
        // Groups appear in first-appearance order, so slots were pushed in order.
        debug_assert_eq!(b.len(), if shared_b { groups.len() } else { model.num_layers() });
        Ok(Self {
            a_moments: a.iter().map(|m| AdamMoments::zeros(m.rows(), m.cols())).collect(),
            b_moments: b.iter().map(|m| AdamMoments::zeros(m.rows(), m.cols())).collect(),
            a,
            b,
            layer_slot,
            base: model.base_weights(),
            t: 0,
            rank,
            shared_b,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn shared_b(&self) -> bool {
        self.shared_b
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn effective_weight(&self, layer: usize) -> Result<Matrix> {
        let a = self.a.get(layer).ok_or(Error::UnknownLayer(layer))?;
        Ok(&self.base[layer] + &a.matmul(&self.b[self.layer_slot[layer]]))
    }

    pub fn effective_weights(&self) -> Vec<Matrix> {
        (0..self.a.len())
            .map(|l| self.effective_weight(l).expect("layer in range"))
            .collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.a.iter().chain(&self.b).map(|m| m.rows() * m.cols()).sum()
    }

    /// One Adam step on every `A` and `B`; returns per-layer weight deltas.
    pub fn step(&mut self, grads: &GradientSet, hyper: &Hyper) -> Result<Vec<Matrix>> {
        check_grads("LoraState::step", grads, self.base.iter().map(Matrix::shape))?;
        let before: Vec<Matrix> = (0..self.a.len()).map(|l| self.a[l].matmul(&self.b[self.layer_slot[l]])).collect();
        self.t += 1;
        let t = self.t;

        let mut grad_b: Vec<Matrix> = self.b.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect();
        let mut grad_a = Vec::with_capacity(self.a.len());
        for (l, g) in grads.layers().iter().enumerate() {
            let slot = self.layer_slot[l];
            grad_a.push(g.matmul_t(&self.b[slot]));
            grad_b[slot] += &self.a[l].t_matmul(g);
        }
        for (l, ga) in grad_a.iter().enumerate() {
            let dir = self.a_moments[l].direction(ga, t, hyper);
            self.a[l].axpy(-hyper.eta, &dir);
        }
        for (s, gb) in grad_b.iter().enumerate() {
            let dir = self.b_moments[s].direction(gb, t, hyper);
            self.b[s].axpy(-hyper.eta, &dir);
        }
        Ok((0..self.a.len())
            .map(|l| &self.a[l].matmul(&self.b[self.layer_slot[l]]) - &before[l])
            .collect())
    }
}

/// `Σ_i (m_i + n_i) r`, or `Σ_i m_i r + Σ_f r n_f` with `B` shared.
pub fn lora_param_count(model: &ToyModel, rank: usize, shared_b: bool) -> usize {
    let a: usize = model.layers().iter().map(|l| l.out_dim() * rank).sum();
    let b: usize = if shared_b {
        model
            .groups()
            .iter()
            .map(|g| rank * model.layers()[model.layers_in_group(g)[0]].in_dim())
            .sum()
    } else {
        model.layers().iter().map(|l| rank * l.in_dim()).sum()
    };
    a + b
}

/// Adam on every weight entry.
#[derive(Clone, Debug)]
pub struct FullFtState {
    weights: Vec<Matrix>,
    moments: Vec<AdamMoments>,
    t: u64,
}

impl FullFtState {
    pub fn init(model: &ToyModel) -> Self {
        let weights = model.base_weights();
        Self {
            moments: weights.iter().map(|w| AdamMoments::zeros(w.rows(), w.cols())).collect(),
            weights,
            t: 0,
        }
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, grads: &GradientSet, hyper: &Hyper) -> Result<Vec<Matrix>> {
        check_grads("FullFtState::step", grads, self.weights.iter().map(Matrix::shape))?;
        self.t += 1;
        let mut deltas = Vec::with_capacity(self.weights.len());
        for (l, g) in grads.layers().iter().enumerate() {
            let delta = self.moments[l].direction(g, self.t, hyper).scale(-hyper.eta);
            self.weights[l] += &delta;
            deltas.push(delta);
        }
        Ok(deltas)
    }
}

pub fn full_ft_param_count(model: &ToyModel) -> usize {
    model.layers().iter().map(|l| l.out_dim() * l.in_dim()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerSpec, LossKind, Nonlinearity};
    use crate::optim::param_count;

    fn toy(layers_per_group: usize, width: usize) -> ToyModel {
        let mut r = rng::seeded(9);
        let layers = (0..2 * layers_per_group)
            .map(|i| LayerSpec::new(if i % 2 == 0 { "q" } else { "v" }, rng::gaussian_matrix(&mut r, width, width, 0.3)))
            .collect();
        ToyModel::new(layers, Nonlinearity::Tanh, LossKind::MeanSquaredError).unwrap()
    }

    #[test]
    fn lora_starts_at_base_and_ignores_zero_gradients() {
        let model = toy(2, 6);
        let hyper = Hyper::new(2, 0.05);
        let mut st = LoraState::init(&model, 2, 1, false).unwrap();
        assert_eq!(st.effective_weights(), model.base_weights());
        let deltas = st.step(&GradientSet::zeros_like(&model.base_weights()), &hyper).unwrap();
        assert!(deltas.iter().all(|d| d.max_abs() == 0.0));
        assert_eq!(st.effective_weights(), model.base_weights());
    }

    #[test]
    fn lora_shared_b_has_one_b_per_group() {
        let model = toy(3, 5);
        let st = LoraState::init(&model, 2, 1, true).unwrap();
        assert_eq!(st.trainable_params(), lora_param_count(&model, 2, true));
        assert_eq!(st.trainable_params(), 6 * 5 * 2 + 2 * 2 * 5);
        let unshared = LoraState::init(&model, 2, 1, false).unwrap();
        assert_eq!(unshared.trainable_params(), 6 * (5 + 5) * 2);
    }

    #[test]
    fn lora_init_is_seeded() {
        let model = toy(1, 4);
        let a = LoraState::init(&model, 2, 5, false).unwrap();
        let b = LoraState::init(&model, 2, 5, false).unwrap();
        assert_eq!(a.a, b.a);
        let c = LoraState::init(&model, 2, 6, false).unwrap();
        assert_ne!(a.a, c.a);
    }

    #[test]
    fn full_ft_zero_gradients_leave_weights() {
        let model = toy(1, 4);
        let mut st = FullFtState::init(&model);
        st.step(&GradientSet::zeros_like(&model.base_weights()), &Hyper::new(1, 0.1)).unwrap();
        assert_eq!(st.weights(), model.base_weights().as_slice());
        assert!(st.step(&GradientSet(vec![]), &Hyper::new(1, 0.1)).is_err());
    }

    #[test]
    fn random_projectors_are_seeded() {
        let model = toy(1, 6);
        let hyper = Hyper::new(3, 0.1);
        let a = random_pica_init(&model, &hyper, 4).unwrap();
        let b = random_pica_init(&model, &hyper, 4).unwrap();
        assert_eq!(a.projectors(), b.projectors());
        let c = random_pica_init(&model, &hyper, 5).unwrap();
        assert_ne!(a.projectors(), c.projectors());
    }

    #[test]
    fn parameter_ordering_on_default_shape() {
        let model = toy(2, 32);
        for r in [1, 2, 4, 8, 16] {
            let full = full_ft_param_count(&model);
            let lora = lora_param_count(&model, r, false);
            let nosh = param_count(&model, r, Sharing::PerLayer);
            let shared = param_count(&model, r, Sharing::Shared);
            // (m + n) r reaches m n at r = m / 2 on square layers.
            if 2 * r < 32 {
                assert!(full > lora, "r = {r}");
            } else {
                assert_eq!(full, lora);
            }
            assert!(lora >= nosh && nosh > shared, "r = {r}");
            assert_eq!(no_sharing_pica_init(&model, &Hyper::new(r, 0.1)).unwrap().trainable_params(), nosh);
        }
    }
}
