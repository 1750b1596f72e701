use multiatlas::dataset::Label;
use multiatlas::gat::{train, GatConfig, GatModel, GraphInput, Sample, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NODES: usize = 8;

fn ring(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut l = vec![(i + n - 1) % n, i, (i + 1) % n];
            l.sort_unstable();
            l
        })
        .collect()
}

fn toy_set(count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|g| {
            let label = if g % 2 == 0 { Label::Positive } else { Label::Negative };
            let shift = if label == Label::Positive { 1.0 } else { -1.0 };
            let x = Array2::from_shape_fn((NODES, NODES), |(_, c)| {
                rng.random_range(-0.5..0.5) + if c < 2 { shift } else { 0.0 }
            });
            Sample {
                graph: GraphInput::new(&x, &ring(NODES), &Array2::ones((NODES, NODES))),
                label,
            }
        })
        .collect()
}

fn small_config() -> GatConfig {
    GatConfig {
        hidden_units: 16,
        ..GatConfig::default()
    }
}

#[test]
fn separable_toy_set_is_fit_within_200_epochs() {
    let data = toy_set(10, 1);
    let model = GatModel::new("toy", NODES, small_config(), 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: 200,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(model, &data, &data, &cfg).unwrap();
    assert_eq!(out.best_validation_accuracy, 1.0);
    let (_, acc) = out.model.evaluate(&data).unwrap();
    assert_eq!(acc, 1.0);
    for s in &data {
        let p = out.model.predict(&s.graph).unwrap();
        assert!(p[s.label.index()] > 0.5);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = toy_set(6, 2);
    let model = GatModel::new("toy", NODES, small_config(), 3).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 5,
        patience: 5,
        ..TrainConfig::default()
    };
    let out = train(model.clone(), &data, &data, &cfg).unwrap();
    assert_eq!(out.model.params, model.params);
    assert_eq!(out.history.len(), 5);
}

#[test]
fn same_seed_same_curves() {
    let data = toy_set(12, 3);
    let cfg = TrainConfig {
        max_epochs: 8,
        patience: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let model = GatModel::new("toy", NODES, small_config(), 4).unwrap();
        train(model, &data, &data[..4], &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
}

#[test]
fn early_stopping_respects_patience() {
    let data = toy_set(8, 4);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 50,
        patience: 3,
        ..TrainConfig::default()
    };
    let model = GatModel::new("toy", NODES, small_config(), 1).unwrap();
    let out = train(model, &data, &data, &cfg).unwrap();
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.history.len(), 3);
}

#[test]
fn training_needs_both_classes() {
    let data: Vec<Sample> = toy_set(6, 5).into_iter().filter(|s| s.label == Label::Positive).collect();
    let model = GatModel::new("toy", NODES, small_config(), 1).unwrap();
    assert!(train(model, &data, &data, &TrainConfig::default()).is_err());
}

#[test]
fn prediction_is_invariant_to_node_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 7;
    let x = Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.0..1.0));
    let adj = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut l: Vec<usize> = (0..n).filter(|&j| j == i || (i * 3 + j) % 4 == 0).collect();
            l.sort_unstable();
            l
        })
        .collect();
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let mut inverse = [0; 7];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let px = Array2::from_shape_fn((n, 5), |(i, c)| x[[perm[i], c]]);
    let padj = Array2::from_shape_fn((n, n), |(i, j)| adj[[perm[i], perm[j]]]);
    let plists: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut l: Vec<usize> = lists[perm[i]].iter().map(|&j| inverse[j]).collect();
            l.sort_unstable();
            l
        })
        .collect();

    for edge_weighted in [false, true] {
        let cfg = GatConfig {
            edge_weighted_attention: edge_weighted,
            ..GatConfig::default()
        };
        let model = GatModel::new("p", 5, cfg, 2).unwrap();
        let p = model.predict(&GraphInput::new(&x, &lists, &adj)).unwrap();
        let q = model.predict(&GraphInput::new(&px, &plists, &padj)).unwrap();
        assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
    }
}
