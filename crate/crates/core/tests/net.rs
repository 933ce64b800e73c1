use proptest::prelude::*;

use pica_core::net::{
    finite_diff_grad, forward, grad, gradient_check, Batch, GradCheckConfig, GradientSet, LayerSpec, LossKind, Nonlinearity,
    ToyModel,
};
use pica_core::{rng, Matrix};

fn two_layer_tanh(seed: u64) -> (ToyModel, Batch) {
    let mut g = rng::seeded(seed);
    let w1 = rng::gaussian_matrix(&mut g, 5, 4, 0.5);
    let w2 = rng::gaussian_matrix(&mut g, 3, 5, 0.5);
    let model = ToyModel::new(
        vec![LayerSpec::new("q", w1), LayerSpec::new("v", w2)],
        Nonlinearity::Tanh,
        LossKind::MeanSquaredError,
    )
    .unwrap();
    let batch = Batch {
        inputs: rng::gaussian_matrix(&mut g, 4, 6, 1.0),
        targets: rng::gaussian_matrix(&mut g, 3, 6, 1.0),
    };
    (model, batch)
}

/// Loss of a two-layer tanh network written out sample by sample.
fn straight_line_loss(w1: &Matrix, w2: &Matrix, batch: &Batch) -> f64 {
    let mut total = 0.0;
    for b in 0..batch.size() {
        let mut hidden = vec![0.0; w1.rows()];
        for (i, h) in hidden.iter_mut().enumerate() {
            let mut z = 0.0;
            for j in 0..w1.cols() {
                z += w1[(i, j)] * batch.inputs[(j, b)];
            }
            *h = z.tanh();
        }
        for k in 0..w2.rows() {
            let mut y = 0.0;
            for (i, h) in hidden.iter().enumerate() {
                y += w2[(k, i)] * h;
            }
            total += (y - batch.targets[(k, b)]).powi(2);
        }
    }
    total / batch.size() as f64
}

fn max_abs(a: &GradientSet, b: &GradientSet) -> f64 {
    a.layers().iter().zip(b.layers()).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

#[test]
fn forward_matches_straight_line_evaluation() {
    let (model, batch) = two_layer_tanh(1);
    let w = model.base_weights();
    let got = forward(&model, &w, &batch).unwrap();
    let want = straight_line_loss(&w[0], &w[1], &batch);
    assert!((got - want).abs() <= 1e-13 * want.max(1.0));
}

#[test]
fn finite_differences_are_exact_on_a_quadratic() {
    let mut g = rng::seeded(2);
    let model = ToyModel::new(
        vec![LayerSpec::new("q", rng::gaussian_matrix(&mut g, 3, 4, 1.0))],
        Nonlinearity::Identity,
        LossKind::MeanSquaredError,
    )
    .unwrap();
    let batch = Batch {
        inputs: rng::gaussian_matrix(&mut g, 4, 5, 1.0),
        targets: rng::gaussian_matrix(&mut g, 3, 5, 1.0),
    };
    let w = model.base_weights();
    let numeric = finite_diff_grad(&model, &w, &batch, 1e-4).unwrap();
    assert!(max_abs(&numeric, &grad(&model, &w, &batch).unwrap()) <= 1e-7);
}

#[test]
fn halving_the_step_quarters_the_error() {
    let (model, batch) = two_layer_tanh(3);
    let w = model.base_weights();
    let exact = grad(&model, &w, &batch).unwrap();
    let coarse = max_abs(&finite_diff_grad(&model, &w, &batch, 2e-2).unwrap(), &exact);
    let fine = max_abs(&finite_diff_grad(&model, &w, &batch, 1e-2).unwrap(), &exact);
    let ratio = coarse / fine;
    assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn zero_gradient_point_gives_zero_differences() {
    let (model, mut batch) = two_layer_tanh(4);
    let w = model.base_weights();
    batch.targets = pica_core::net::predict(&model, &w, &batch.inputs).unwrap();
    let numeric = finite_diff_grad(&model, &w, &batch, 1e-5).unwrap();
    assert!(numeric.max_abs() <= 1e-9);
    assert!(grad(&model, &w, &batch).unwrap().max_abs() <= 1e-12);
}

#[test]
fn gradient_descent_decreases_a_quadratic_loss_monotonically() {
    let mut g = rng::seeded(5);
    let model = ToyModel::new(
        vec![
            LayerSpec::new("q", rng::gaussian_matrix(&mut g, 4, 4, 0.5)),
            LayerSpec::new("v", rng::gaussian_matrix(&mut g, 4, 4, 0.5)),
        ],
        Nonlinearity::Identity,
        LossKind::MeanSquaredError,
    )
    .unwrap();
    let batch = Batch {
        inputs: rng::gaussian_matrix(&mut g, 4, 8, 1.0),
        targets: rng::gaussian_matrix(&mut g, 4, 8, 1.0),
    };
    let mut w = model.base_weights();
    let mut last = forward(&model, &w, &batch).unwrap();
    for _ in 0..200 {
        let gs = grad(&model, &w, &batch).unwrap();
        for (wl, gl) in w.iter_mut().zip(gs.layers()) {
            wl.axpy(-1e-3, gl);
        }
        let loss = forward(&model, &w, &batch).unwrap();
        assert!(loss < last);
        last = loss;
    }
}

#[test]
fn forward_and_grad_are_deterministic() {
    let (model, batch) = two_layer_tanh(6);
    let w = model.base_weights();
    assert_eq!(forward(&model, &w, &batch).unwrap().to_bits(), forward(&model, &w, &batch).unwrap().to_bits());
    assert_eq!(grad(&model, &w, &batch).unwrap(), grad(&model, &w, &batch).unwrap());
}

fn nonlinearity() -> impl Strategy<Value = Nonlinearity> {
    prop_oneof![Just(Nonlinearity::Tanh), Just(Nonlinearity::Relu), Just(Nonlinearity::Identity)]
}

fn loss() -> impl Strategy<Value = LossKind> {
    prop_oneof![Just(LossKind::MeanSquaredError), Just(LossKind::SoftmaxCrossEntropy)]
}

proptest! {
    // Fixed seed: a relu pre-activation within one finite-difference step
    // of zero makes the central difference straddle the kink, so a random
    // seed would fail a small fraction of runs.
    #![proptest_config(ProptestConfig {
        cases: 48,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x6772_6164),
        ..ProptestConfig::default()
    })]

    #[test]
    fn analytic_gradients_match_finite_differences(
        widths in prop::collection::vec(1usize..=16, 2..=4),
        nonlinearity in nonlinearity(),
        loss in loss(),
        batch in 1usize..=8,
        seed in any::<u64>(),
    ) {
        let cfg = GradCheckConfig { widths, nonlinearity, loss, batch };
        let err = gradient_check(&cfg, seed).unwrap();
        prop_assert!(err <= 1e-5, "rel err {} for {:?}", err, cfg);
    }
}
