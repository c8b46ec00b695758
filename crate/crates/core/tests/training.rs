use denn::dataset::{generate_synthetic, DatasetConfig};
use denn::loss::ContrastiveVariant;
use denn::trainer::{train, TrainConfig};

/// One prototype per cluster and no label noise: every sample's labels are
/// exactly its cluster's labels.
fn noiseless(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        label_noise: 0.0,
        prototypes_per_cluster: 1,
        train_size: 400,
        valid_size: 50,
        test_size: 10,
        ..Default::default()
    }
}

#[test]
fn loss_decreases_over_windows_on_noiseless_data() {
    for seed in 1..=3 {
        let s = generate_synthetic(&noiseless(seed)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.003,
            max_iters: 50,
            eval_every: 0,
            seed,
            ..Default::default()
        };
        let out = train(&s.train, &s.valid, &cfg).unwrap();
        let windows: Vec<f64> = out
            .history
            .chunks(10)
            .map(|w| w.iter().map(|h| h.total).sum::<f64>() / w.len() as f64)
            .collect();
        assert_eq!(windows.len(), 5);
        for pair in windows.windows(2) {
            assert!(pair[1] < pair[0], "seed {seed}: window means {windows:?}");
        }
    }
}

#[test]
fn every_variant_trains_to_finite_losses() {
    let s = generate_synthetic(&noiseless(4)).unwrap();
    for variant in ContrastiveVariant::ALL {
        let cfg = TrainConfig {
            learning_rate: 0.003,
            max_iters: 30,
            eval_every: 10,
            variant,
            ..Default::default()
        };
        let out = train(&s.train, &s.valid, &cfg).unwrap();
        assert!(out.history.iter().all(|h| h.total.is_finite()), "{variant}");
        assert!(out.best_valid_micro_f1.is_some());
    }
}

#[test]
fn best_state_has_the_best_validation_score() {
    let s = generate_synthetic(&noiseless(5)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.003,
        max_iters: 60,
        eval_every: 10,
        ..Default::default()
    };
    let out = train(&s.train, &s.valid, &cfg).unwrap();
    let best = out
        .history
        .iter()
        .filter_map(|h| h.valid_micro_f1)
        .fold(f64::MIN, f64::max);
    assert_eq!(out.best_valid_micro_f1, Some(best));
    assert_eq!(
        denn::trainer::classifier_micro_f1(&out.best_state, &s.valid.samples).unwrap(),
        best
    );
}
