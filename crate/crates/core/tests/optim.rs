mod common;

use proptest::prelude::*;

use pica_core::net::{self, GradientSet, LayerSpec, LossKind, Nonlinearity, ToyModel};
use pica_core::optim::{Aggregation, Hyper, PicaOptions, PicaState, Sharing, UpdateRule};
use pica_core::rng;
use pica_core::task::{Perturbation, SyntheticTask, TaskSpec};
use pica_core::Matrix;

use common::{slots_by_group, ReparamAdam};

fn quadratic_task(seed: u64) -> SyntheticTask {
    let mut spec = TaskSpec::uniform(12, &["q", "v", "q"], Perturbation::Unstructured { scale: 0.3 });
    spec.nonlinearity = Nonlinearity::Identity;
    spec.streamed = false;
    SyntheticTask::generate(seed, spec).unwrap()
}

fn random_grads(model: &ToyModel, seed: u64) -> GradientSet {
    let mut g = rng::seeded(seed);
    GradientSet(
        model
            .layers()
            .iter()
            .map(|l| rng::gaussian_matrix(&mut g, l.out_dim(), l.in_dim(), 1.0))
            .collect(),
    )
}

#[test]
fn ten_steps_match_the_reparameterized_oracle() {
    let task = quadratic_task(1);
    let model = &task.model;
    let hyper = Hyper::new(3, 1e-2);
    let mut state = PicaState::init(model, &hyper).unwrap();
    let mut oracle = ReparamAdam::new(model, 3, slots_by_group(model, true), false);
    for step in 0..10 {
        let batch = task.train_batch(step);
        let grads = net::grad(model, &state.effective_weights(model).unwrap(), &batch).unwrap();
        let oracle_grads = net::grad(model, &oracle.weights(model), &batch).unwrap();
        state.step(&grads, &hyper).unwrap();
        oracle.step(&oracle_grads, &hyper);
        for (a, b) in state.effective_weights(model).unwrap().iter().zip(oracle.weights(model)) {
            assert!(a.max_abs_diff(&b) <= 1e-12, "step {step}");
        }
    }
}

#[test]
fn optimizer_steps_descend_a_convex_loss() {
    let task = quadratic_task(2);
    let model = &task.model;
    let hyper = Hyper::new(12, 1e-2);
    let batch = task.train_batch(0);
    let mut state = PicaState::init(model, &hyper).unwrap();
    let start = net::forward(model, &model.base_weights(), &batch).unwrap();
    for _ in 0..50 {
        let grads = net::grad(model, &state.effective_weights(model).unwrap(), &batch).unwrap();
        state.step(&grads, &hyper).unwrap();
    }
    let end = net::forward(model, &state.effective_weights(model).unwrap(), &batch).unwrap();
    assert!(end < 0.5 * start, "{start} -> {end}");
}

#[test]
fn plain_gd_moves_b_by_the_projected_negative_gradient() {
    let task = quadratic_task(3);
    let model = &task.model;
    let hyper = Hyper::new(2, 0.1);
    let options = PicaOptions {
        rule: UpdateRule::PlainGd,
        ..PicaOptions::default()
    };
    let mut state = PicaState::init_with(model, &hyper, options).unwrap();
    let grads = random_grads(model, 4);
    let deltas = state.step(&grads, &hyper).unwrap();
    // Group q holds layers 0 and 2, summed.
    let r: Matrix = [0, 2]
        .iter()
        .map(|&l| state.projector(l).unwrap().compress(&grads.layers()[l]))
        .fold(Matrix::zeros(2, 12), |acc, x| &acc - &x);
    let b = &state.group("q").unwrap().b;
    assert!(b.max_abs_diff(&r.scale(0.1)) <= 1e-15);
    assert!(deltas[0].max_abs_diff(&state.projector(0).unwrap().lift(b)) <= 1e-15);
}

#[test]
fn equal_base_weights_in_a_group_get_identical_deltas() {
    let mut g = rng::seeded(5);
    let w = rng::gaussian_matrix(&mut g, 8, 8, 0.5);
    let x = rng::gaussian_matrix(&mut g, 8, 8, 0.5);
    let model = ToyModel::new(
        vec![LayerSpec::new("q", w.clone()), LayerSpec::new("v", x), LayerSpec::new("q", w)],
        Nonlinearity::Tanh,
        LossKind::MeanSquaredError,
    )
    .unwrap();
    let hyper = Hyper::new(3, 1e-2);
    let mut state = PicaState::init(&model, &hyper).unwrap();
    for step in 0..20 {
        let deltas = state.step(&random_grads(&model, step), &hyper).unwrap();
        assert_eq!(deltas[0], deltas[2], "step {step}");
    }
}

#[test]
fn identical_runs_give_bit_identical_state() {
    let task = quadratic_task(6);
    let run = || {
        let hyper = Hyper::new(4, 1e-2);
        let mut state = PicaState::init(&task.model, &hyper).unwrap();
        for step in 0..30 {
            let grads = net::grad(&task.model, &state.effective_weights(&task.model).unwrap(), &task.train_batch(step)).unwrap();
            state.step(&grads, &hyper).unwrap();
        }
        state.groups().map(|(_, g)| g.clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resetting_b_returns_the_base_weights() {
    let task = quadratic_task(7);
    let hyper = Hyper::new(4, 1e-2);
    let mut state = PicaState::init(&task.model, &hyper).unwrap();
    state.step(&random_grads(&task.model, 1), &hyper).unwrap();
    assert_ne!(state.effective_weights(&task.model).unwrap(), task.model.base_weights());
    for id in ["q", "v"] {
        let g = state.group_mut(id).unwrap();
        g.b = Matrix::zeros(g.b.rows(), g.b.cols());
    }
    assert_eq!(state.effective_weights(&task.model).unwrap(), task.model.base_weights());
}

fn options() -> impl Strategy<Value = PicaOptions> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(plain, per_layer, mean)| PicaOptions {
        rule: if plain { UpdateRule::PlainGd } else { UpdateRule::Adam },
        sharing: if per_layer { Sharing::PerLayer } else { Sharing::Shared },
        aggregation: if mean { Aggregation::Mean } else { Aggregation::Sum },
        ..PicaOptions::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn updates_stay_in_the_projector_span(seed in any::<u64>(), rank in 1usize..=8, options in options(), steps in 1u64..15) {
        let task = quadratic_task(seed);
        let model = &task.model;
        let hyper = Hyper::new(rank, 1e-2);
        let mut state = PicaState::init_with(model, &hyper, options).unwrap();
        for step in 0..steps {
            let grads = net::grad(model, &state.effective_weights(model).unwrap(), &task.train_batch(step)).unwrap();
            let deltas = state.step(&grads, &hyper).unwrap();
            for (l, d) in deltas.iter().enumerate() {
                let resid = state.projector(l).unwrap().residual(d).unwrap().frobenius_norm();
                prop_assert!(resid <= 1e-10 * d.frobenius_norm().max(1.0));
            }
        }
        prop_assert_eq!(state.step_count(), steps);
        for (l, w) in state.effective_weights(model).unwrap().iter().enumerate() {
            let delta = w - &model.layers()[l].base_weight;
            let resid = state.projector(l).unwrap().residual(&delta).unwrap().frobenius_norm();
            prop_assert!(resid <= 1e-10 * delta.frobenius_norm().max(1.0));
        }
        for (_, g) in state.groups() {
            prop_assert!(g.moments.v.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn adam_matches_the_reparameterized_oracle(seed in any::<u64>(), rank in 1usize..=6, per_layer in any::<bool>(), mean in any::<bool>()) {
        let task = quadratic_task(seed);
        let model = &task.model;
        let hyper = Hyper::new(rank, 5e-3);
        let options = PicaOptions {
            sharing: if per_layer { Sharing::PerLayer } else { Sharing::Shared },
            aggregation: if mean { Aggregation::Mean } else { Aggregation::Sum },
            ..PicaOptions::default()
        };
        let mut state = PicaState::init_with(model, &hyper, options).unwrap();
        let mut oracle = ReparamAdam::new(model, rank, slots_by_group(model, !per_layer), mean);
        for step in 0..10 {
            let batch = task.train_batch(step);
            let grads = net::grad(model, &state.effective_weights(model).unwrap(), &batch).unwrap();
            let oracle_grads = net::grad(model, &oracle.weights(model), &batch).unwrap();
            state.step(&grads, &hyper).unwrap();
            oracle.step(&oracle_grads, &hyper);
            for (a, b) in state.effective_weights(model).unwrap().iter().zip(oracle.weights(model)) {
                prop_assert!(a.max_abs_diff(&b) <= 1e-12);
            }
        }
    }
}
