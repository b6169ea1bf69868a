use partparse::dataset::{synth_dataset, templates, NegativeKind, SynthConfig};
use partparse::featurestack::synth::noise_stack;
use partparse::inference::{evaluate_energy, parse, Unaries};
use partparse::paramlearn::{
    convex_step, dual_coordinate_step, featurize, featurize_parse, train_latent_svm, Solver, TrainConfig, TrainingExample,
};
use partparse::shapemodel::{LandmarkCounts, MixtureModel, WeightVector};
use partparse::structlearn::{learn_structure, StructureConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CHANNELS: usize = 2;

fn model(grid: usize) -> MixtureModel {
    let cfg = StructureConfig {
        k: 3,
        counts: LandmarkCounts::default(),
        grid_size: grid,
        square_side: 3,
        channels: CHANNELS,
        seed: 0,
    };
    learn_structure(&templates(grid), &cfg).unwrap().model
}

fn examples(model: &MixtureModel, pos: usize, neg: usize, noise: f64, seed: u64) -> Vec<TrainingExample> {
    let cfg = SynthConfig { count: pos, noise, seed, negatives: neg, negative_kind: NegativeKind::Noise };
    let data = synth_dataset(model, &cfg).unwrap();
    data.instances
        .into_iter()
        .map(|(stack, _)| TrainingExample { stack, label: 1 })
        .chain(data.negatives.into_iter().map(|stack| TrainingExample { stack, label: -1 }))
        .collect()
}

fn random_weights(rng: &mut ChaCha8Rng) -> WeightVector {
    WeightVector {
        w_def: [rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)],
        w_edge: rng.random_range(-2.0..1.0),
        w_app: (0..2 * CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect(),
        w_part: rng.random_range(-1.0..1.0),
    }
}

#[test]
fn energy_equals_weights_dot_features() {
    let m = model(64);
    let ex = examples(&m, 6, 3, 0.2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for e in &ex {
        let w = random_weights(&mut rng);
        let r = parse(&m, &e.stack, &w).unwrap();
        let phi = featurize_parse(&m, &e.stack, &r).unwrap();
        assert!((w.dot(&phi) - r.total_energy).abs() < 1e-6, "{} vs {}", w.dot(&phi), r.total_energy);
        assert!((r.score + r.total_energy).abs() < 1e-12);

        // same identity at a configuration chosen under other weights
        let other = random_weights(&mut rng);
        let tree = &m.mixtures[r.mixture_index];
        let u = Unaries::build(&e.stack, &other, m.square_side).unwrap();
        let e2 = evaluate_energy(tree, &u, other.w_def, &r.positions).unwrap();
        let phi2 = featurize(tree, &e.stack, &r.positions, m.square_side).unwrap();
        assert!((other.dot(&phi2) - e2).abs() < 1e-6);
    }
}

#[test]
fn energy_is_linear_in_weights() {
    let m = model(64);
    let ex = examples(&m, 2, 0, 0.3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random_weights(&mut rng), random_weights(&mut rng));
    let sum = WeightVector::from_vec(&a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| x + y).collect::<Vec<_>>()).unwrap();
    for e in &ex {
        let r = parse(&m, &e.stack, &a).unwrap();
        let tree = &m.mixtures[r.mixture_index];
        let energy = |w: &WeightVector| {
            let u = Unaries::build(&e.stack, w, m.square_side).unwrap();
            evaluate_energy(tree, &u, w.w_def, &r.positions).unwrap()
        };
        assert!((energy(&sum) - energy(&a) - energy(&b)).abs() < 1e-6);
    }
}

#[test]
fn zero_weights_score_zero() {
    let m = model(64);
    let s = noise_stack(64, 64, CHANNELS, 1, 2);
    assert_eq!(parse(&m, &s, &WeightVector::zeros(CHANNELS)).unwrap().score, 0.0);
}

#[test]
fn zero_c_gives_floor_weights() {
    let m = model(64);
    let ex = examples(&m, 4, 4, 0.0, 1);
    let mut cfg = TrainConfig::new(CHANNELS, 0.0, 2, 0);
    cfg.min_deformation = 0.0;
    let r = train_latent_svm(&m, &ex, &cfg).unwrap();
    assert!(r.weights.to_vec().iter().all(|v| *v == 0.0));
    cfg.min_deformation = 0.01;
    let r = train_latent_svm(&m, &ex, &cfg).unwrap();
    let v = r.weights.to_vec();
    assert_eq!(&v[..2], &[0.01, 0.01]);
    assert!(v[2..].iter().all(|x| *x == 0.0));
}

#[test]
fn separable_set_is_fit_and_deterministic() {
    let m = model(64);
    let ex = examples(&m, 20, 20, 0.0, 21);
    let cfg = TrainConfig::new(CHANNELS, 1.0, 5, 9);
    let r = train_latent_svm(&m, &ex, &cfg).unwrap();
    assert_eq!(r.final_accuracy, 1.0);
    assert!(!r.degenerate);
    assert!(r.weights.w_def.iter().all(|v| *v >= cfg.min_deformation));
    for round in &r.rounds {
        assert!(round.convex_trace.windows(2).all(|w| w[1] <= w[0]));
    }
    let again = train_latent_svm(&m, &ex, &cfg).unwrap();
    assert_eq!(r, again);
    assert_eq!(r.weights, again.weights);
}

#[test]
fn single_label_sets_are_flagged() {
    let m = model(64);
    let ex = examples(&m, 3, 0, 0.0, 2);
    let r = train_latent_svm(&m, &ex, &TrainConfig::new(CHANNELS, 1.0, 1, 0)).unwrap();
    assert!(r.degenerate);
    let bad = vec![TrainingExample { stack: ex[0].stack.clone(), label: 0 }];
    assert_eq!(train_latent_svm(&m, &bad, &TrainConfig::new(CHANNELS, 1.0, 1, 0)).unwrap_err().exit_code(), 7);
    assert!(train_latent_svm(&m, &ex, &TrainConfig::new(CHANNELS, -1.0, 1, 0)).is_err());
}

/// `min_w 1/2 w^2 + C max(0, 1 - a w)` has its minimum at `min(C a, 1/a)`.
fn one_dim_optimum(a: f64, c: f64) -> f64 {
    (c * a).min(1.0 / a)
}

#[test]
fn solvers_reach_the_scalar_optimum() {
    for (a, c) in [(2.0, 0.1), (2.0, 5.0), (0.5, 1.0), (3.0, 0.3)] {
        let feats = vec![(vec![0.0, 0.0, a, 0.0], -1.0)];
        let w0 = vec![0.0; 4];
        let target = one_dim_optimum(a, c);
        let (w, _) = dual_coordinate_step(&w0, c, &feats, 50, 0, 0.0);
        assert!((w[2] - target).abs() < 1e-9, "dcd {a} {c}: {} vs {target}", w[2]);
        let (w, _) = convex_step(&w0, c, &feats, 2000, 0.0);
        assert!((w[2] - target).abs() < 2e-2, "sg {a} {c}: {} vs {target}", w[2]);
    }
}

#[test]
fn solver_choice_round_trips_as_kebab_case() {
    assert_eq!(serde_json::to_string(&Solver::DualCoordinate).unwrap(), "\"dual-coordinate\"");
}

fn feature_set() -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
    proptest::collection::vec(
        (proptest::collection::vec(-5.0f64..5.0, 6), any::<bool>()).prop_map(|(v, pos)| (v, if pos { 1.0 } else { -1.0 })),
        1..12,
    )
}

fn primal(w: &[f64], c: f64, feats: &[(Vec<f64>, f64)]) -> f64 {
    let reg: f64 = w.iter().map(|v| v * v).sum::<f64>() / 2.0;
    reg + c * feats.iter().map(|(p, y)| (1.0 + y * w.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()).max(0.0)).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn traces_never_increase(feats in feature_set(), c in 0.0f64..3.0, seed in any::<u64>(), floor in 0.0f64..0.1) {
        let w0 = vec![0.2, 0.1, -1.0, 0.0, 0.5, 0.0];
        let (w, t) = dual_coordinate_step(&w0, c, &feats, 30, seed, floor);
        prop_assert!(t.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(w[0] >= floor && w[1] >= floor);
        prop_assert!((primal(&w, c, &feats) - t.last().unwrap()).abs() < 1e-9);
        let (w, t) = convex_step(&w0, c, &feats, 60, floor);
        prop_assert!(t.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(w[0] >= floor && w[1] >= floor);
        prop_assert!((primal(&w, c, &feats) - t.last().unwrap()).abs() < 1e-9);
    }
}
