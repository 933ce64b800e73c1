use proptest::prelude::*;

use pica_core::adapter_io::{self, decode, encode, fingerprint, restore};
use pica_core::net::{GradientSet, LayerSpec, LossKind, Nonlinearity, ToyModel};
use pica_core::optim::{Hyper, PicaOptions, PicaState, ProjectorSource, Sharing};
use pica_core::{rng, Error};

fn model(dims: &[usize], groups: &[&str], seed: u64) -> ToyModel {
    let mut g = rng::seeded(seed);
    let layers = groups
        .iter()
        .enumerate()
        .map(|(i, gr)| LayerSpec::new(*gr, rng::gaussian_matrix(&mut g, dims[i + 1], dims[i], 0.4)))
        .collect();
    ToyModel::new(layers, Nonlinearity::Tanh, LossKind::MeanSquaredError).unwrap()
}

fn trained(model: &ToyModel, hyper: &Hyper, options: PicaOptions, steps: u64, seed: u64) -> PicaState {
    let mut state = PicaState::init_with(model, hyper, options).unwrap();
    let mut g = rng::seeded(seed);
    for _ in 0..steps {
        let grads = GradientSet(
            model
                .layers()
                .iter()
                .map(|l| rng::gaussian_matrix(&mut g, l.out_dim(), l.in_dim(), 1.0))
                .collect(),
        );
        state.step(&grads, hyper).unwrap();
    }
    state
}

#[test]
fn projector_section_size_matches_the_formula() {
    let groups = ["q", "v", "q", "v", "q", "v", "q", "v"];
    let m = model(&[10, 12, 10, 12, 10, 12, 10, 12, 10], &groups, 1);
    let r = 3;
    let state = trained(&m, &Hyper::new(r, 1e-2), PicaOptions::default(), 2, 1);
    let small = encode(&state, &m, false).unwrap();
    let big = encode(&state, &m, true).unwrap();
    let b_payload: usize = [10usize, 12].iter().map(|n| r * n * 8).sum();
    let u_payload: usize = m.layers().iter().map(|l| l.out_dim() * r * 8).sum();
    assert_eq!(big.len() - small.len(), u_payload);
    assert!(small.len() - b_payload <= 1024);
    let ratio = u_payload as f64 / b_payload as f64;
    let sum_m: usize = m.layers().iter().map(|l| l.out_dim()).sum();
    assert!((ratio - (sum_m * r) as f64 / (r * 22) as f64).abs() < 1e-12);
}

#[test]
fn fingerprint_reacts_to_every_single_bit_flip() {
    let m = model(&[8, 8, 8], &["q", "v"], 2);
    let base = fingerprint(&m);
    assert_eq!(base, fingerprint(&m.clone()));
    let mut g = rng::seeded(3);
    use rand::Rng;
    for _ in 0..1000 {
        let mut layers = m.layers().to_vec();
        let l = g.random_range(0..layers.len());
        let (i, j) = (g.random_range(0..8), g.random_range(0..8));
        let bit = g.random_range(0..64);
        let x = layers[l].base_weight[(i, j)];
        layers[l].base_weight[(i, j)] = f64::from_bits(x.to_bits() ^ (1 << bit));
        if !layers[l].base_weight[(i, j)].is_finite() {
            continue;
        }
        let flipped = ToyModel::new(layers, m.nonlinearity(), m.loss()).unwrap();
        assert_ne!(fingerprint(&flipped), base);
    }
}

#[test]
fn empty_model_fingerprint_is_the_offset_basis() {
    let empty = ToyModel::new(Vec::new(), Nonlinearity::Tanh, LossKind::MeanSquaredError).unwrap();
    assert_eq!(fingerprint(&empty), 0xcbf2_9ce4_8422_2325);
}

#[test]
fn save_load_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(&[6, 6, 6, 6], &["q", "v", "q"], 4);
    let state = trained(&m, &Hyper::new(2, 1e-2), PicaOptions::default(), 3, 4);
    let path = dir.path().join("adapter.pica");
    let written = adapter_io::save(&state, &m, &path, false).unwrap();
    assert_eq!(written, std::fs::metadata(&path).unwrap().len());
    let before = m.clone();
    let loaded = adapter_io::load(&path, &m).unwrap();
    assert_eq!(m, before);
    assert_eq!(loaded.effective_weights(&m).unwrap(), state.effective_weights(&m).unwrap());

    let other = model(&[6, 6, 6, 6], &["q", "v", "q"], 5);
    match adapter_io::load(&path, &other) {
        Err(Error::BaseModelMismatch { expected, found }) => {
            assert_eq!(expected, fingerprint(&m));
            assert_eq!(found, fingerprint(&other));
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn unwritable_path_reports_the_path() {
    let m = model(&[4, 4], &["q"], 6);
    let state = PicaState::init(&m, &Hyper::new(1, 1e-2)).unwrap();
    let path = std::path::Path::new("/nonexistent-dir/for/adapter.pica");
    match adapter_io::save(&state, &m, path, false) {
        Err(Error::Io { path: p, .. }) => assert_eq!(p, path),
        other => panic!("{other:?}"),
    }
}

#[test]
fn corrupt_cached_projector_is_rejected() {
    let m = model(&[6, 6, 6], &["q", "v"], 7);
    let state = trained(&m, &Hyper::new(2, 1e-2), PicaOptions::default(), 1, 7);
    let mut ckpt = decode(&encode(&state, &m, true).unwrap()).unwrap();
    let p = &mut ckpt.projectors.as_mut().unwrap()[0];
    p[(0, 0)] += 0.5;
    assert!(restore(&ckpt, &m).is_err());
}

#[test]
fn checkpoint_for_a_differently_grouped_model_is_rejected() {
    let m = model(&[6, 6, 6], &["q", "v"], 8);
    let state = trained(&m, &Hyper::new(2, 1e-2), PicaOptions::default(), 1, 8);
    let mut ckpt = decode(&encode(&state, &m, false).unwrap()).unwrap();
    ckpt.slots[1].id = "k".into();
    assert!(matches!(restore(&ckpt, &m), Err(Error::InvalidArgument(_))));
}

fn options() -> impl Strategy<Value = PicaOptions> {
    (any::<bool>(), prop::option::of(any::<u64>())).prop_map(|(per_layer, random)| PicaOptions {
        sharing: if per_layer { Sharing::PerLayer } else { Sharing::Shared },
        source: random.map_or(ProjectorSource::ColumnSpace, |seed| ProjectorSource::Random { seed }),
        ..PicaOptions::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_state_round_trips(seed in any::<u64>(), rank in 1usize..=5, steps in 0u64..6, options in options(), cached in any::<bool>()) {
        let m = model(&[8, 6, 8, 5], &["q", "v", "q"], seed);
        let hyper = Hyper::new(rank, 1e-2);
        let state = trained(&m, &hyper, options, steps, seed);
        let bytes = encode(&state, &m, cached).unwrap();
        let ckpt = decode(&bytes).unwrap();
        prop_assert_eq!(ckpt.encode().unwrap(), bytes.clone());
        let back = restore(&ckpt, &m).unwrap();
        prop_assert_eq!(back.step_count(), state.step_count());
        prop_assert_eq!(back.options(), state.options());
        for ((ia, a), (ib, b)) in back.groups().zip(state.groups()) {
            prop_assert_eq!(ia, ib);
            prop_assert_eq!(&a.b, &b.b);
        }
        prop_assert_eq!(back.effective_weights(&m).unwrap(), state.effective_weights(&m).unwrap());
        if !cached {
            prop_assert!(bytes.len() < encode(&state, &m, true).unwrap().len());
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn corrupted_checkpoints_fail_cleanly(seed in any::<u64>(), at in any::<prop::sample::Index>(), xor in 1u8..=255) {
        let m = model(&[6, 6, 6], &["q", "v"], seed);
        let state = trained(&m, &Hyper::new(2, 1e-2), PicaOptions::default(), 2, seed);
        let mut bytes = encode(&state, &m, seed % 2 == 0).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= xor;
        prop_assert!(decode(&bytes).is_err());
    }
}
