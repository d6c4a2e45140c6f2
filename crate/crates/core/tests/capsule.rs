use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use s2i_core::capsule::{
    capsule_loss, capsule_train, capsule_train_with_history, squash, CapsuleConfig, CapsuleError, CapsuleModel,
};
use s2i_core::posteriorgram::Posteriorgram;
use s2i_core::seed;
use s2i_core::ErrorKind;

fn tiny_config(seed: u64) -> CapsuleConfig {
    CapsuleConfig {
        primary_capsules: 2,
        primary_dim: 4,
        output_dim: 2,
        init_scale: 0.5,
        seed,
        ..Default::default()
    }
}

fn random_pg(t: usize, c: usize, rng: &mut impl Rng) -> Posteriorgram {
    let probs = Array2::from_shape_simple_fn((t, c), || rng.random_range(0.01..1.0));
    Posteriorgram::from_probabilities(&probs, 0.04).unwrap()
}

fn permuted(pg: &Posteriorgram, rng: &mut impl Rng) -> Posteriorgram {
    let mut order: Vec<usize> = (0..pg.num_frames()).collect();
    order.shuffle(rng);
    pg.permuted(&order).unwrap()
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-6)`.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = seed::rng(21);
    for trial in 0..3 {
        let model = CapsuleModel::new(3, 2, tiny_config(trial)).unwrap();
        let pgs = [random_pg(5, 3, &mut rng), random_pg(5, 3, &mut rng)];
        let batch = [(&pgs[0], 0usize), (&pgs[1], 1usize)];
        let (_, grad) = model.loss_and_gradient(&batch).unwrap();
        for (name, range) in model.layout().groups() {
            for k in range {
                let h = 1e-5;
                let mut plus = model.clone();
                plus.params_mut()[k] += h;
                let mut minus = model.clone();
                minus.params_mut()[k] -= h;
                let numeric = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
                let err = rel_err(grad[k], numeric);
                assert!(err < 1e-4, "{name}[{k}]: analytic {} numeric {numeric} (rel {err})", grad[k]);
            }
        }
    }
}

#[test]
fn loss_value_matches_forward() {
    let mut rng = seed::rng(22);
    let model = CapsuleModel::new(3, 2, tiny_config(1)).unwrap();
    let pg = random_pg(5, 3, &mut rng);
    let (loss, _) = model.loss_and_gradient(&[(&pg, 1)]).unwrap();
    let lengths = model.forward(&pg).unwrap().lengths;
    assert!((loss - capsule_loss(&lengths, 1, &model.config)).abs() < 1e-15);
}

/// Hand-written margin loss with explicit per-term branches.
fn margin_oracle(lengths: &[f64], label: usize, pos: f64, neg: f64, lambda: f64) -> f64 {
    let mut total = 0.0;
    for (k, &len) in lengths.iter().enumerate() {
        if k == label {
            if len < pos {
                total += (pos - len) * (pos - len);
            }
        } else if len > neg {
            total += lambda * (len - neg) * (len - neg);
        }
    }
    total
}

proptest! {
    #[test]
    fn margin_loss_matches_oracle(lengths in proptest::collection::vec(0.0f64..1.0, 1..10), pick in any::<proptest::sample::Index>()) {
        let cfg = CapsuleConfig::default();
        let label = pick.index(lengths.len());
        let ours = capsule_loss(&lengths, label, &cfg);
        let oracle = margin_oracle(&lengths, label, 0.9, 0.1, 0.5);
        prop_assert!((ours - oracle).abs() < 1e-12);
    }

    #[test]
    fn unit_vectors_squash_to_half(raw in proptest::collection::vec(-1.0f64..1.0, 1..12)) {
        let s = Array1::from(raw);
        let n = s.dot(&s).sqrt();
        prop_assume!(n > 1e-6);
        let unit = &s / n;
        let v = squash(unit.view());
        prop_assert!((v.dot(&v).sqrt() - 0.5).abs() < 1e-12);
        prop_assert!((v.dot(&unit) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn squash_is_bounded(raw in proptest::collection::vec(-1e6f64..1e6, 1..12)) {
        let v = squash(Array1::from(raw).view());
        prop_assert!(v.dot(&v).sqrt() < 1.0);
    }
}

#[test]
fn margin_loss_fixed_points() {
    let cfg = CapsuleConfig::default();
    assert_eq!(capsule_loss(&[0.1, 0.9, 0.1], 1, &cfg), 0.0);
    assert!((capsule_loss(&[0.0, 0.0, 0.0], 2, &cfg) - 0.81).abs() < 1e-15);
}

#[test]
fn squash_small_vectors() {
    let s = Array1::from(vec![1e-4 * 0.6, 1e-4 * 0.8]);
    let v = squash(s.view());
    let len = v.dot(&v).sqrt();
    assert!((len / 1e-8 - 1.0).abs() < 0.01);
}

#[test]
fn normalisations_hold_on_random_models() {
    let mut rng = seed::rng(23);
    for trial in 0..20u64 {
        let cfg = CapsuleConfig {
            primary_capsules: 4,
            primary_dim: 6,
            output_dim: 3,
            init_scale: 0.3,
            seed: trial,
            ..Default::default()
        };
        let model = CapsuleModel::new(5, 3, cfg).unwrap();
        let t = rng.random_range(1..15);
        let trace = model.trace(&random_pg(t, 5, &mut rng)).unwrap();
        for row in trace.distribution.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert!(trace.attention.iter().all(|a| *a > 0.0 && *a < 1.0));
        assert_eq!(trace.couplings.len(), 3);
        for c in &trace.couplings {
            for row in c.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
        assert!(trace.output.lengths.iter().all(|l| (0.0..1.0).contains(l)));
    }
}

#[test]
fn frame_order_does_not_matter() {
    let mut rng = seed::rng(24);
    for trial in 0..20u64 {
        let model = CapsuleModel::new(4, 3, CapsuleConfig { primary_capsules: 4, primary_dim: 5, seed: trial, ..Default::default() }).unwrap();
        let pg = random_pg(rng.random_range(2..30), 4, &mut rng);
        let shuffled = permuted(&pg, &mut rng);
        assert_eq!(model.forward(&pg).unwrap(), model.forward(&shuffled).unwrap());
    }
}

#[test]
fn routing_weights_can_force_a_label() {
    let mut rng = seed::rng(25);
    let mut model = CapsuleModel::new(4, 3, CapsuleConfig { primary_capsules: 3, primary_dim: 4, seed: 5, ..Default::default() }).unwrap();
    let dims = model.dims();
    let route = model.layout().route;
    // Zero every transform except those into output capsule 2.
    let per_primary = dims.labels * dims.output_dim * dims.primary_dim;
    for (k, p) in model.params_mut()[route].iter_mut().enumerate() {
        let row = (k % per_primary) / dims.primary_dim;
        *p = if row / dims.output_dim == 2 { 3.0 } else { 0.0 };
    }
    for _ in 0..10 {
        let t = rng.random_range(1..20);
        assert_eq!(model.classify(&random_pg(t, 4, &mut rng)).unwrap(), 2);
    }
}

/// Two labels; label 0 utterances favour symbol 1, label 1 favour symbol 2.
fn separable_set(n: usize, rng: &mut impl Rng) -> Vec<(Posteriorgram, usize)> {
    (0..n)
        .map(|i| {
            let label = i % 2;
            let t = rng.random_range(4..10);
            let probs = Array2::from_shape_fn((t, 3), |(_, j)| {
                let base = rng.random_range(0.01..0.1);
                if j == label + 1 {
                    base + 0.8
                } else {
                    base
                }
            });
            (Posteriorgram::from_probabilities(&probs, 0.04).unwrap(), label)
        })
        .collect()
}

#[test]
fn separable_toy_set_is_learned() {
    let mut rng = seed::rng(26);
    let set = separable_set(10, &mut rng);
    let data: Vec<(&Posteriorgram, usize)> = set.iter().map(|(p, l)| (p, *l)).collect();
    let (model, history) = capsule_train_with_history(&data, 2, &CapsuleConfig::default()).unwrap();
    assert_eq!(history.len(), 100);
    assert!(history[99] < history[0]);
    for (pg, label) in &data {
        assert_eq!(model.classify(pg).unwrap(), *label);
    }
}

#[test]
fn duplicated_full_batch_gives_the_same_model() {
    let mut rng = seed::rng(27);
    let set = separable_set(5, &mut rng);
    let once: Vec<(&Posteriorgram, usize)> = set.iter().map(|(p, l)| (p, *l)).collect();
    let twice: Vec<(&Posteriorgram, usize)> = once.iter().chain(&once).copied().collect();
    let cfg = |batch| CapsuleConfig {
        epochs: 20,
        batch_size: batch,
        shuffle: false,
        ..Default::default()
    };
    let a = capsule_train(&once, 2, &cfg(5)).unwrap();
    let b = capsule_train(&twice, 2, &cfg(10)).unwrap();
    for (x, y) in a.params().iter().zip(b.params()) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn training_is_deterministic() {
    let mut rng = seed::rng(28);
    let set = separable_set(6, &mut rng);
    let data: Vec<(&Posteriorgram, usize)> = set.iter().map(|(p, l)| (p, *l)).collect();
    let cfg = CapsuleConfig { epochs: 5, ..Default::default() };
    assert_eq!(capsule_train(&data, 2, &cfg).unwrap(), capsule_train(&data, 2, &cfg).unwrap());
}

#[test]
fn divergent_training_is_a_numerical_error() {
    let mut rng = seed::rng(29);
    let set = separable_set(4, &mut rng);
    let data: Vec<(&Posteriorgram, usize)> = set.iter().map(|(p, l)| (p, *l)).collect();
    let cfg = CapsuleConfig {
        step_size: 1e300,
        epochs: 5,
        ..Default::default()
    };
    let err = capsule_train(&data, 2, &cfg).unwrap_err();
    assert!(matches!(err, CapsuleError::NonFiniteLoss { .. }), "{err}");
    assert_eq!(err.kind(), ErrorKind::Numerical);
}

#[test]
fn input_checks() {
    let mut rng = seed::rng(30);
    let model = CapsuleModel::new(3, 2, tiny_config(0)).unwrap();
    let wrong = random_pg(4, 5, &mut rng);
    assert!(matches!(model.forward(&wrong), Err(CapsuleError::SymbolMismatch { expected: 3, found: 5 })));
    let pg = random_pg(4, 3, &mut rng);
    assert!(matches!(model.loss_and_gradient(&[(&pg, 2)]), Err(CapsuleError::LabelOutOfRange { .. })));
    assert!(matches!(capsule_train(&[], 2, &CapsuleConfig::default()), Err(CapsuleError::NoTrainingData)));
}

#[test]
fn model_file_round_trip() {
    let mut model = CapsuleModel::new(3, 2, tiny_config(9)).unwrap();
    model.digest = "feedbeef".into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.caps");
    model.save(&path).unwrap();
    let back = CapsuleModel::load(&path).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.dims(), model.dims());
    assert_eq!(back.digest, "feedbeef");
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("CAPS 3 2 4 2 2\n"));
}
