use attrex::data::{generate_synthetic, split, Dataset, Sample, SyntheticSpec};
use attrex::embed::{
    accuracy, compatibility, predict_attributes, predict_class, ranking_loss, ranking_loss_grad_weights, softmax,
    train_general, train_sje, Classifier, DifferentiableMap, EmbeddingModel, GeneralClassifier, HiddenLayer,
    PredictionRule, TrainConfig,
};
use attrex::linalg::Matrix;
use attrex::perturb::loss_grad_wrt_input;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(w: Matrix) -> EmbeddingModel {
    EmbeddingModel::new(w, false, PredictionRule::CompatibilityArgmax).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Σ_i Σ_j θ_i W_ij φ_j by explicit loops.
fn brute_bilinear(theta: &[f64], w: &Matrix, phi: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, t) in theta.iter().enumerate() {
        for (j, p) in phi.iter().enumerate() {
            total += t * w.get(i, j) * p;
        }
    }
    total
}

#[test]
fn compatibility_hand_matrix() {
    let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
    let m = model(w.clone());
    let id = DifferentiableMap::Identity;
    assert_eq!(compatibility(&id, &m, &[1.0, 2.0], &[2.0, 1.0]).unwrap(), 8.0);
    assert_eq!(brute_bilinear(&[1.0, 2.0], &w, &[2.0, 1.0]), 8.0);
    assert_eq!(predict_attributes(&id, &m, &[1.0, 2.0]).unwrap(), vec![1.0, 6.0]);
    assert_eq!(predict_attributes(&id, &m, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);

    let eye = model(Matrix::identity(2));
    assert_eq!(compatibility(&id, &eye, &[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert_eq!(compatibility(&id, &eye, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(predict_attributes(&id, &eye, &[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
}

#[test]
fn compatibility_through_hidden_map_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layer = HiddenLayer::random(4, 3, 5, 2);
    let map = DifferentiableMap::Hidden(layer.clone());
    for _ in 0..20 {
        let x = random_vec(&mut rng, 4);
        let w = random_matrix(&mut rng, 5, 3);
        let phi = random_vec(&mut rng, 3);
        // θ(x) = W2ᵀ tanh(W1ᵀ x + b1), computed with explicit loops.
        let hidden: Vec<f64> = (0..3)
            .map(|k| (layer.b1[k] + (0..4).map(|i| x[i] * layer.w1.get(i, k)).sum::<f64>()).tanh())
            .collect();
        let theta: Vec<f64> = (0..5).map(|o| (0..3).map(|k| hidden[k] * layer.w2.get(k, o)).sum()).collect();
        let got = compatibility(&map, &model(w.clone()), &x, &phi).unwrap();
        assert!((got - brute_bilinear(&theta, &w, &phi)).abs() < 1e-12);
    }
}

#[test]
fn predict_class_rules_match_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let id = DifferentiableMap::Identity;
    for _ in 0..50 {
        let w = random_matrix(&mut rng, 4, 3);
        let table = random_matrix(&mut rng, 5, 3);
        let x = random_vec(&mut rng, 4);
        let attrs = predict_attributes(&id, &model(w.clone()), &x).unwrap();
        let scores: Vec<f64> = (0..5).map(|c| brute_bilinear(&x, &w, table.row(c))).collect();
        let dists: Vec<f64> = (0..5)
            .map(|c| attrs.iter().zip(table.row(c)).map(|(a, p)| (a - p).powi(2)).sum::<f64>())
            .collect();
        let argmax = (0..5).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
        let argmin = (0..5).fold(0, |b, c| if dists[c] < dists[b] { c } else { b });
        let argmax_model = model(w.clone());
        let nearest_model = EmbeddingModel::new(w, false, PredictionRule::NearestAttribute).unwrap();
        assert_eq!(predict_class(&id, &argmax_model, &x, &table).unwrap(), argmax);
        assert_eq!(predict_class(&id, &nearest_model, &x, &table).unwrap(), argmin);
    }
}

#[test]
fn nearest_rule_recovers_exact_signature_and_ties_go_low() {
    let id = DifferentiableMap::Identity;
    let table = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5], vec![0.2, 0.9]]).unwrap();
    let nearest = EmbeddingModel::new(Matrix::identity(2), false, PredictionRule::NearestAttribute).unwrap();
    assert_eq!(predict_class(&id, &nearest, &[0.2, 0.9], &table).unwrap(), 3);
    let twins = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.4, 0.4], vec![0.4, 0.4]]).unwrap();
    assert_eq!(predict_class(&id, &model(Matrix::identity(2)), &[1.0, 1.0], &twins).unwrap(), 1);
}

#[test]
fn ranking_loss_equals_exhaustive_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let id = DifferentiableMap::Identity;
    for _ in 0..50 {
        let w = random_matrix(&mut rng, 3, 4);
        let table = random_matrix(&mut rng, 4, 4);
        let x = random_vec(&mut rng, 3);
        let y = rng.random_range(0..4);
        let margin = rng.random_range(0.0..2.0);
        let f = |c: usize| brute_bilinear(&x, &w, table.row(c));
        let expected = (0..4).filter(|&c| c != y).map(|c| margin + f(c) - f(y)).fold(0.0, f64::max);
        let got = ranking_loss(&id, &model(w), &x, y, &table, margin).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }
    let flat = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert_eq!(ranking_loss(&id, &model(Matrix::identity(2)), &[0.3, 0.4], 1, &flat, 1.0).unwrap(), 1.0);
}

#[test]
fn small_sgd_step_lowers_the_sample_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let id = DifferentiableMap::Identity;
    let mut checked = 0;
    while checked < 20 {
        let w = random_matrix(&mut rng, 3, 4);
        let table = random_matrix(&mut rng, 5, 4);
        let x = random_vec(&mut rng, 3);
        let y = rng.random_range(0..5);
        let before = ranking_loss(&id, &model(w.clone()), &x, y, &table, 1.0).unwrap();
        if before < 1e-3 {
            continue;
        }
        let g = ranking_loss_grad_weights(&id, &model(w.clone()), &x, y, &table, 1.0).unwrap();
        let stepped: Vec<f64> = w.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a - 1e-4 * b).collect();
        let after = ranking_loss(&id, &model(Matrix::from_vec(3, 4, stepped).unwrap()), &x, y, &table, 1.0).unwrap();
        assert!(after < before, "{after} !< {before}");
        checked += 1;
    }
}

#[test]
fn cross_entropy_input_gradient_hand_derived() {
    // V columns are class weight vectors; z = xᵀV + b.
    let v = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
    let clf = GeneralClassifier::new(v.clone(), vec![0.1, -0.2]).unwrap();
    let x = [0.3, -0.4];
    let z: [f64; 2] = [0.3 * 1.0 - 0.4 * 0.5 + 0.1, -0.3 - 0.4 * 2.0 - 0.2];
    let e = [z[0].exp(), z[1].exp()];
    let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
    let r = [p[0], p[1] - 1.0];
    let expected = [r[0] * v.get(0, 0) + r[1] * v.get(0, 1), r[0] * v.get(1, 0) + r[1] * v.get(1, 1)];
    let got = loss_grad_wrt_input(&DifferentiableMap::Identity, &clf, &x, 1).unwrap();
    for (g, e) in got.iter().zip(expected) {
        assert!((g - e).abs() < 1e-12);
    }
    let s = softmax(&z);
    assert!((s[0] - p[0]).abs() < 1e-15);
}

fn suite(similarity: f64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        num_classes: 10,
        num_attributes: 8,
        feature_dim: 16,
        samples_per_class: 50,
        noise_sigma: 0.05,
        class_similarity: similarity,
        seed: 42,
    })
    .unwrap()
}

fn sje_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.005,
        epochs: 100,
        margin: 0.05,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn sje_training_is_deterministic_and_accurate() {
    let ds = suite(0.7);
    let s = split(&ds, [0.6, 0.1, 0.3], 42).unwrap();
    let id = DifferentiableMap::Identity;
    let a = train_sje(&ds, &s, &id, &sje_config()).unwrap();
    let b = train_sje(&ds, &s, &id, &sje_config()).unwrap();
    assert_eq!(a.model.w.as_slice(), b.model.w.as_slice());
    let clf = a.model.classifier(ds.class_attributes(), 0.0).unwrap();
    assert!(accuracy(&id, &clf, &ds, &s.test).unwrap() >= 0.95);
}

#[test]
fn sje_trains_through_a_hidden_map() {
    let ds = suite(0.7);
    let s = split(&ds, [0.6, 0.1, 0.3], 42).unwrap();
    let map = DifferentiableMap::Hidden(HiddenLayer::random(16, 32, 16, 5));
    let trained = train_sje(&ds, &s, &map, &sje_config()).unwrap();
    let clf = trained.model.classifier(ds.class_attributes(), 0.0).unwrap();
    assert!(accuracy(&map, &clf, &ds, &s.test).unwrap() >= 0.9);
}

#[test]
fn general_classifier_separates_two_clusters() {
    let samples: Vec<Sample> = (0..40)
        .map(|i| {
            let label = i % 2;
            let offset = if label == 0 { -1.0 } else { 1.0 };
            Sample {
                features: vec![offset + 0.01 * (i as f64), offset - 0.02 * (i as f64 % 5.0)],
                label,
            }
        })
        .collect();
    let table = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let ds = Dataset::new(samples, table, vec!["a".into(), "b".into()], vec!["x".into(), "y".into()], 2, None).unwrap();
    let s = split(&ds, [1.0, 0.0, 0.0], 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 50,
        seed: 3,
        ..TrainConfig::default()
    };
    let id = DifferentiableMap::Identity;
    let a = train_general(&ds, &s, &id, &cfg).unwrap();
    let b = train_general(&ds, &s, &id, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(accuracy(&id, &a.model, &ds, &s.train).unwrap(), 1.0);
    assert_eq!(a.model.num_classes(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compatibility_is_linear_in_each_argument(seed in any::<u64>(), scale in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = DifferentiableMap::Identity;
        let w = random_matrix(&mut rng, 4, 3);
        let x = random_vec(&mut rng, 4);
        let phi = random_vec(&mut rng, 3);
        let base = compatibility(&id, &model(w.clone()), &x, &phi).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let ps: Vec<f64> = phi.iter().map(|v| v * scale).collect();
        let tol = 1e-12 * (1.0 + base.abs() * scale.abs());
        prop_assert!((compatibility(&id, &model(w.clone()), &xs, &phi).unwrap() - scale * base).abs() < tol);
        prop_assert!((compatibility(&id, &model(w.clone()), &x, &ps).unwrap() - scale * base).abs() < tol);
        prop_assert!((compatibility(&id, &model(w.scaled(scale)), &x, &phi).unwrap() - scale * base).abs() < tol);
    }

    #[test]
    fn argmax_prediction_ignores_positive_weight_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = DifferentiableMap::Identity;
        let w = random_matrix(&mut rng, 4, 3);
        let table = random_matrix(&mut rng, 6, 3);
        let x = random_vec(&mut rng, 4);
        prop_assert_eq!(
            predict_class(&id, &model(w.clone()), &x, &table).unwrap(),
            predict_class(&id, &model(w.scaled(scale)), &x, &table).unwrap()
        );
    }

    #[test]
    fn ranking_loss_is_zero_exactly_when_margins_hold(seed in any::<u64>(), margin in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = DifferentiableMap::Identity;
        let w = random_matrix(&mut rng, 3, 3);
        let table = random_matrix(&mut rng, 4, 3);
        let x = random_vec(&mut rng, 3);
        let y = rng.random_range(0..4);
        let loss = ranking_loss(&id, &model(w.clone()), &x, y, &table, margin).unwrap();
        prop_assert!(loss >= 0.0);
        let f = |c: usize| brute_bilinear(&x, &w, table.row(c));
        let satisfied = (0..4).filter(|&c| c != y).all(|c| f(y) - f(c) >= margin);
        prop_assert_eq!(loss == 0.0, satisfied);
    }
}
