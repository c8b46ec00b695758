//! Finite-difference check of the analytic training gradient.
//!
//! A random encoder and a random duplicated batch are drawn from a seed, the
//! dropout masks are frozen, and every parameter's analytic derivative of
//! `bce + alpha * con` is compared against a central difference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelVec, Sample};
use crate::encoder::{Activation, EncoderDims, EncoderState, Params};
use crate::error::{DennError, Result};
use crate::loss::ContrastiveVariant;
use crate::math::{stream_rng, DennRng};
use crate::trainer::{batch_objective, Objective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Samples per batch; the batch holds twice as many views.
    pub batch_size: usize,
    pub alpha: f64,
    pub tau1: f64,
    pub variant: ContrastiveVariant,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub seed: u64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            vocab_size: 32,
            hidden: 16,
            embed_dim: 8,
            num_classes: 6,
            batch_size: 8,
            alpha: 0.1,
            tau1: 0.05,
            variant: ContrastiveVariant::Dcl,
            activation: Activation::Tanh,
            dropout_rate: 0.1,
            seed: 1,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

impl GradcheckConfig {
    /// Random small configuration (at most 16 views, 8 classes, embedding 8).
    pub fn random(rng: &mut DennRng) -> Self {
        GradcheckConfig {
            vocab_size: rng.random_range(4..=32),
            hidden: rng.random_range(2..=16),
            embed_dim: rng.random_range(2..=8),
            num_classes: rng.random_range(1..=8),
            batch_size: rng.random_range(1..=8),
            alpha: rng.random_range(0.0..1.0),
            tau1: rng.random_range(0.05..1.0),
            variant: ContrastiveVariant::ALL[rng.random_range(0..4)],
            activation: Activation::Tanh,
            dropout_rate: rng.random_range(0.0..0.5),
            seed: rng.random(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub num_params: usize,
    pub num_failed: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Tensor name and flat index of the entry with the largest relative error.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

fn random_batch(cfg: &GradcheckConfig, rng: &mut DennRng) -> Result<Vec<Sample>> {
    (0..cfg.batch_size)
        .map(|i| {
            let nnz = rng.random_range(1..=cfg.vocab_size.min(6));
            let mut idx: Vec<u32> = (0..cfg.vocab_size as u32).collect();
            let (chosen, _) = rand::seq::SliceRandom::partial_shuffle(&mut idx[..], rng, nnz);
            let features = chosen.iter().map(|&w| (w, rng.random_range(0.2..2.0))).collect();
            let mut labels = LabelVec::zeros(cfg.num_classes);
            for c in 0..cfg.num_classes {
                labels.set(c, rng.random_bool(0.4));
            }
            if labels.count() == 0 {
                labels.set(rng.random_range(0..cfg.num_classes), true);
            }
            Sample::new(format!("g{i}"), features, labels)
        })
        .collect()
}

/// Compares analytic and central-difference gradients for every parameter.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0) || cfg.batch_size == 0 {
        return Err(DennError::config("gradcheck needs step > 0 and batch_size >= 1"));
    }
    let dims = EncoderDims {
        vocab_size: cfg.vocab_size,
        hidden: cfg.hidden,
        embed_dim: cfg.embed_dim,
        num_classes: cfg.num_classes,
    };
    let mut state = EncoderState::init(dims, cfg.activation, cfg.dropout_rate, cfg.seed)?;
    let mut rng = stream_rng(cfg.seed, 1);
    let samples = random_batch(cfg, &mut rng)?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let masks: Vec<Vec<f64>> = (0..2 * batch.len()).map(|_| state.sample_mask(&mut rng)).collect();
    let obj = Objective {
        alpha: cfg.alpha,
        tau1: cfg.tau1,
        variant: cfg.variant,
    };

    let analytic = batch_objective(&state, &batch, &masks, obj)?.grads;
    let mut report = GradcheckReport {
        num_params: analytic.num_params(),
        num_failed: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        passed: true,
    };
    let h = cfg.step;
    for (t, name) in Params::tensor_names().into_iter().enumerate() {
        for k in 0..analytic.tensors()[t].len() {
            let orig = state.params.tensors()[t][k];
            state.params.tensors_mut()[t][k] = orig + h;
            let up = batch_objective(&state, &batch, &masks, obj)?.total;
            state.params.tensors_mut()[t][k] = orig - h;
            let down = batch_objective(&state, &batch, &masks, obj)?.total;
            state.params.tensors_mut()[t][k] = orig;

            let fd = (up - down) / (2.0 * h);
            let a = analytic.tensors()[t][k];
            let abs = (fd - a).abs();
            let scale = fd.abs().max(a.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            if abs > report.max_abs_error {
                report.max_abs_error = abs;
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), k));
            }
            if !(rel <= cfg.rel_tol || abs <= cfg.abs_tol) {
                report.num_failed += 1;
            }
        }
    }
    report.passed = report.num_failed == 0;
    Ok(report)
}
