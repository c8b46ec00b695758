//! End-to-end runs: train, build the datastore, predict, score. Shared by the
//! `ablate` command and the benchmark tests.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::DennConfig;
use crate::dataset::{frequency_groups, generate_synthetic, Dataset, LabelVec, Sample, Splits};
use crate::datastore::Datastore;
use crate::encoder::EncoderState;
use crate::error::Result;
use crate::eval::{confusion, MetricsReport};
use crate::inference::{predict_all, InferenceConfig, InferenceMode, PredictionBundle};
use crate::loss::ContrastiveVariant;
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// Binary decisions of `bundles` scored against the gold labels of `test`.
pub fn score(
    test: &[Sample],
    bundles: &[PredictionBundle],
    threshold: f64,
    groups: Option<&[usize]>,
) -> Result<MetricsReport> {
    let gold: Vec<LabelVec> = test.iter().map(|s| s.labels.clone()).collect();
    let pred: Vec<LabelVec> = bundles.iter().map(|b| b.decide(threshold)).collect();
    MetricsReport::new(&confusion(&gold, &pred)?, groups)
}

pub fn evaluate(
    state: &EncoderState,
    store: &Datastore,
    test: &[Sample],
    cfg: &InferenceConfig,
    groups: Option<&[usize]>,
) -> Result<MetricsReport> {
    let bundles = predict_all(state, store, test, cfg)?;
    score(test, &bundles, cfg.decision_threshold, groups)
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub study: String,
    pub setting: String,
    pub micro_f1: f64,
    /// Absent for per-group rows, which report micro-F1 only.
    pub macro_f1: Option<f64>,
}

impl AblationRow {
    fn new(study: &str, setting: impl Into<String>, m: &MetricsReport) -> Self {
        AblationRow {
            study: study.to_string(),
            setting: setting.into(),
            micro_f1: m.micro.f1,
            macro_f1: Some(m.macro_.f1),
        }
    }
}

pub fn mode_config(base: &InferenceConfig, mode: InferenceMode) -> InferenceConfig {
    InferenceConfig {
        mode,
        ..base.clone()
    }
}

/// Classifier-only, kNN-only and DENN scores of one trained model.
pub fn mode_rows(state: &EncoderState, store: &Datastore, test: &[Sample], cfg: &InferenceConfig) -> Result<Vec<AblationRow>> {
    [InferenceMode::ClassifierOnly, InferenceMode::KnnOnly, InferenceMode::Denn]
        .into_iter()
        .map(|mode| {
            let m = evaluate(state, store, test, &mode_config(cfg, mode), None)?;
            Ok(AblationRow::new("mode", mode.to_string(), &m))
        })
        .collect()
}

pub fn train_variant(train_set: &Dataset, valid: &Dataset, cfg: &TrainConfig, variant: ContrastiveVariant) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        variant,
        ..cfg.clone()
    };
    train(train_set, valid, &cfg)
}

/// Every study of the `ablate` command on fixed splits.
pub fn ablate(splits: &Splits, cfg: &DennConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let (train_set, valid, test) = (&splits.train, &splits.valid, &splits.test.samples);
    let base = train(train_set, valid, &cfg.train)?;
    let store = Datastore::build(&base.best_state, &train_set.samples)?;
    let mut rows = mode_rows(&base.best_state, &store, test, &cfg.inference)?;

    for &variant in &cfg.ablate.variants {
        let out = if variant == cfg.train.variant {
            base.clone()
        } else {
            train_variant(train_set, valid, &cfg.train, variant)?
        };
        let store = Datastore::build(&out.best_state, &train_set.samples)?;
        let m = evaluate(&out.best_state, &store, test, &cfg.inference, None)?;
        rows.push(AblationRow::new("variant", variant.to_string(), &m));
    }
    for &k in &cfg.ablate.ks {
        let inf = InferenceConfig { k, ..cfg.inference.clone() };
        let m = evaluate(&base.best_state, &store, test, &inf, None)?;
        rows.push(AblationRow::new("k", k.to_string(), &m));
    }
    for &gamma in &cfg.ablate.gammas {
        let inf = InferenceConfig { gamma, ..cfg.inference.clone() };
        let m = evaluate(&base.best_state, &store, test, &inf, None)?;
        rows.push(AblationRow::new("gamma", gamma.to_string(), &m));
    }
    for &fraction in &cfg.ablate.fractions {
        let partial = Datastore::build_fraction(&base.best_state, &train_set.samples, fraction)?;
        let m = evaluate(&base.best_state, &partial, test, &cfg.inference, None)?;
        rows.push(AblationRow::new("store_fraction", fraction.to_string(), &m));
    }
    if cfg.ablate.num_groups > 0 {
        let groups = frequency_groups(&train_set.samples, train_set.num_classes, cfg.ablate.num_groups)?;
        for mode in [InferenceMode::ClassifierOnly, InferenceMode::Denn] {
            let m = evaluate(&base.best_state, &store, test, &mode_config(&cfg.inference, mode), Some(&groups))?;
            for g in m.groups.iter().flatten() {
                rows.push(AblationRow {
                    study: format!("group/{mode}"),
                    setting: format!("group {} ({} labels)", g.group + 1, g.num_labels),
                    micro_f1: g.micro_f1,
                    macro_f1: None,
                });
            }
        }
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<22}{:<20}{:>10}{:>10}\n", "study", "setting", "micro F1", "macro F1");
    for r in rows {
        let macro_f1 = r.macro_f1.map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m));
        s.push_str(&format!(
            "{:<22}{:<20}{:>10.2}{:>10}\n",
            r.study,
            r.setting,
            100.0 * r.micro_f1,
            macro_f1
        ));
    }
    s
}

/// Outcome of the full synthetic pipeline for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub classifier: MetricsReport,
    pub knn: MetricsReport,
    pub denn: MetricsReport,
    /// DENN micro/macro F1 with stores built from each of `fractions`.
    pub fractions: Vec<(f64, MetricsReport)>,
    pub seconds: f64,
}

/// Generates data, trains, builds the store and scores the three inference
/// modes, all from `cfg` with every seed set to `seed`.
pub fn run_seed(cfg: &DennConfig, seed: u64, fractions: &[f64]) -> Result<SeedRun> {
    let start = Instant::now();
    let cfg = cfg.clone().with_seed(seed);
    let splits = generate_synthetic(&cfg.data)?;
    let out = train(&splits.train, &splits.valid, &cfg.train)?;
    let state = &out.best_state;
    let store = Datastore::build(state, &splits.train.samples)?;
    let test = &splits.test.samples;
    let inf = &cfg.inference;
    let classifier = evaluate(state, &store, test, &mode_config(inf, InferenceMode::ClassifierOnly), None)?;
    let knn = evaluate(state, &store, test, &mode_config(inf, InferenceMode::KnnOnly), None)?;
    let denn = evaluate(state, &store, test, &mode_config(inf, InferenceMode::Denn), None)?;
    let fractions = fractions
        .iter()
        .map(|&f| {
            let partial = Datastore::build_fraction(state, &splits.train.samples, f)?;
            Ok((f, evaluate(state, &partial, test, &mode_config(inf, InferenceMode::Denn), None)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedRun {
        seed,
        classifier,
        knn,
        denn,
        fractions,
        seconds: start.elapsed().as_secs_f64(),
    })
}
