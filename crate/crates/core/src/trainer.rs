//! Minibatch training: every iteration encodes `N` samples twice with
//! independent dropout masks, adds the summed BCE of all `2N` views to
//! `alpha` times the contrastive loss, backpropagates both paths and takes an
//! Adam step. The state with the best classifier-only validation micro-F1 is
//! kept.
//!
//! Randomness is derived per purpose from the run seed (see
//! [`crate::math::stream_rng`]): stream 0 initializes parameters, stream
//! `1 + t` draws the dropout masks of iteration `t`, and stream `2^63 + e`
//! shuffles epoch `e`. Resuming from a [`TrainerCheckpoint`] therefore
//! continues the exact trajectory of an uninterrupted run.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelVec, Sample};
use crate::encoder::{Activation, EncoderDims, EncoderState, Params};
use crate::error::{DennError, Result};
use crate::eval::{confusion, micro_prf};
use crate::loss::{bce_with_logits, contrastive_loss, similarity_backward, ContrastiveVariant};
use crate::math::stream_rng;

const EPOCH_STREAM: u64 = 1 << 63;
pub const TRAINER_FORMAT: &str = "denn-trainer";
pub const TRAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub tau1: f64,
    pub max_iters: u64,
    /// Validation interval in iterations; the final iteration is always evaluated.
    pub eval_every: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub variant: ContrastiveVariant,
    pub dropout_rate: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 5e-5,
            alpha: 0.1,
            tau1: 0.05,
            max_iters: 1000,
            eval_every: 100,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            variant: ContrastiveVariant::Dcl,
            dropout_rate: 0.1,
            hidden: 64,
            embed_dim: 32,
            activation: Activation::Tanh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DennError::config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.tau1 > 0.0) || !self.tau1.is_finite() {
            return bad(format!("tau1 must be > 0, got {}", self.tau1));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("adam epsilon must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return bad("hidden and embed_dim must be >= 1".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            alpha: self.alpha,
            tau1: self.tau1,
            variant: self.variant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub tau1: f64,
    pub variant: ContrastiveVariant,
}

/// First/second moment buffers and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &Params) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut Params, grads: &Params, adam: &mut AdamState, h: AdamHyper) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&adam.m) || !params.same_shape(&adam.v) {
        return Err(DennError::dims("adam: parameter, gradient and moment shapes differ"));
    }
    adam.step += 1;
    let t = adam.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let AdamState { m, v, .. } = adam;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Loss components and parameter gradients of one duplicated batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub bce: f64,
    pub con: f64,
    pub total: f64,
    pub grads: Params,
}

/// `sum_i bce_i + alpha * sum_i con_i` over the `2N` views of `batch` with
/// the given dropout masks (`masks[i]` and `masks[i + N]` belong to
/// `batch[i]`), and its exact gradient.
pub fn batch_objective(
    state: &EncoderState,
    batch: &[&Sample],
    masks: &[Vec<f64>],
    obj: Objective,
) -> Result<BatchOutput> {
    let n = batch.len();
    if n == 0 || masks.len() != 2 * n {
        return Err(DennError::dims(format!(
            "batch of {n} samples needs {} masks, got {}",
            2 * n,
            masks.len()
        )));
    }
    let traces = (0..2 * n)
        .map(|v| state.forward_with_mask(batch[v % n].features(), &masks[v]))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<LabelVec> = (0..2 * n).map(|v| batch[v % n].labels.clone()).collect();

    let mut bce = 0.0;
    let mut grad_logits = Vec::with_capacity(2 * n);
    for (t, y) in traces.iter().zip(&labels) {
        let (l, g) = bce_with_logits(&t.logits, y)?;
        bce += l;
        grad_logits.push(g);
    }

    let embeddings: Vec<Vec<f64>> = traces.iter().map(|t| t.embedding.clone()).collect();
    let (con, grad_emb) = if obj.alpha > 0.0 {
        let (con, grad_s) = contrastive_loss(&embeddings, &labels, obj.tau1, obj.variant)?;
        let mut gh = similarity_backward(&embeddings, &grad_s)?;
        for row in &mut gh {
            for x in row.iter_mut() {
                *x *= obj.alpha;
            }
        }
        (con, gh)
    } else {
        (0.0, vec![vec![0.0; state.dims.embed_dim]; 2 * n])
    };

    let mut grads = state.params.zeros_like();
    for ((t, gz), gh) in traces.iter().zip(&grad_logits).zip(&grad_emb) {
        state.accumulate_backward(t, gh, gz, &mut grads)?;
    }
    Ok(BatchOutput {
        bce,
        con,
        total: crate::loss::total_loss(bce, con, obj.alpha),
        grads,
    })
}

/// Classifier-only micro-F1 at threshold 0.5.
pub fn classifier_micro_f1(state: &EncoderState, samples: &[Sample]) -> Result<f64> {
    let mut gold = Vec::with_capacity(samples.len());
    let mut pred = Vec::with_capacity(samples.len());
    for s in samples {
        let t = state.forward_eval(s.features())?;
        // sigmoid(z) >= 0.5 exactly when z >= 0
        pred.push(LabelVec::from_bools(t.logits.iter().map(|&z| z >= 0.0).collect()));
        gold.push(s.labels.clone());
    }
    Ok(micro_prf(&confusion(&gold, &pred)?).f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: u64,
    pub bce: f64,
    pub con: f64,
    pub total: f64,
    pub valid_micro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub iteration: u64,
    pub valid_micro_f1: f64,
    pub model: EncoderState,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub iteration: u64,
    pub model: EncoderState,
    pub adam: AdamState,
    pub best: Option<BestSnapshot>,
}

impl TrainerCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| DennError::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self).map_err(|e| DennError::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| DennError::io(path, e))?;
        out.flush().map_err(|e| DennError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| DennError::io(path, e))?;
        let ckpt: TrainerCheckpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| DennError::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format != TRAINER_FORMAT || ckpt.version != TRAINER_VERSION {
            return Err(DennError::Format(format!(
                "{}: not a version {TRAINER_VERSION} trainer checkpoint",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a [Sample],
    valid: &'a [Sample],
    state: EncoderState,
    adam: AdamState,
    iteration: u64,
    best: Option<BestSnapshot>,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, train: &'a Dataset, valid: &'a [Sample]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(DennError::invalid("training set is empty"));
        }
        let dims = EncoderDims {
            vocab_size: train.vocab_size,
            hidden: cfg.hidden,
            embed_dim: cfg.embed_dim,
            num_classes: train.num_classes,
        };
        let state = EncoderState::init(dims, cfg.activation, cfg.dropout_rate, cfg.seed)?;
        let adam = AdamState::new(&state.params);
        Ok(Trainer {
            cfg,
            train: &train.samples,
            valid,
            state,
            adam,
            iteration: 0,
            best: None,
            epoch_order: None,
        })
    }

    pub fn resume(ckpt: TrainerCheckpoint, train: &'a Dataset, valid: &'a [Sample]) -> Result<Self> {
        ckpt.config.validate()?;
        if train.is_empty() {
            return Err(DennError::invalid("training set is empty"));
        }
        if ckpt.model.dims.vocab_size != train.vocab_size || ckpt.model.dims.num_classes != train.num_classes {
            return Err(DennError::dims("checkpoint dims do not match the training data"));
        }
        Ok(Trainer {
            cfg: ckpt.config,
            train: &train.samples,
            valid,
            state: ckpt.model,
            adam: ckpt.adam,
            iteration: ckpt.iteration,
            best: ckpt.best,
            epoch_order: None,
        })
    }

    pub fn checkpoint(&self) -> TrainerCheckpoint {
        TrainerCheckpoint {
            format: TRAINER_FORMAT.into(),
            version: TRAINER_VERSION,
            config: self.cfg.clone(),
            iteration: self.iteration,
            model: self.state.clone(),
            adam: self.adam.clone(),
            best: self.best.clone(),
        }
    }

    pub fn state(&self) -> &EncoderState {
        &self.state
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn best(&self) -> Option<&BestSnapshot> {
        self.best.as_ref()
    }

    fn sample_at(&mut self, position: u64) -> usize {
        let n = self.train.len() as u64;
        let epoch = position / n;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut stream_rng(self.cfg.seed, EPOCH_STREAM + epoch));
            self.epoch_order = Some((epoch, order));
        }
        let (_, order) = self.epoch_order.as_ref().expect("filled above");
        order[(position % n) as usize]
    }

    /// Runs one iteration and returns its history record.
    pub fn step(&mut self) -> Result<HistoryRecord> {
        let t = self.iteration;
        let n = self.cfg.batch_size;
        let start = t * n as u64;
        let idx: Vec<usize> = (0..n as u64).map(|k| self.sample_at(start + k)).collect();
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.train[i]).collect();

        let mut rng = stream_rng(self.cfg.seed, 1 + t);
        let masks: Vec<Vec<f64>> = (0..2 * n).map(|_| self.state.sample_mask(&mut rng)).collect();
        let out = batch_objective(&self.state, &batch, &masks, self.cfg.objective())?;

        let hyper = AdamHyper {
            lr: self.cfg.learning_rate,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.epsilon,
        };
        adam_step(&mut self.state.params, &out.grads, &mut self.adam, hyper)?;
        self.iteration += 1;

        let due = self.cfg.eval_every > 0 && self.iteration.is_multiple_of(self.cfg.eval_every);
        let last = self.iteration == self.cfg.max_iters;
        let valid_micro_f1 = if !self.valid.is_empty() && (due || last) {
            let f1 = classifier_micro_f1(&self.state, self.valid)?;
            if self.best.as_ref().is_none_or(|b| f1 > b.valid_micro_f1) {
                self.best = Some(BestSnapshot {
                    iteration: self.iteration,
                    valid_micro_f1: f1,
                    model: self.state.clone(),
                });
            }
            Some(f1)
        } else {
            None
        };
        Ok(HistoryRecord {
            iteration: self.iteration,
            bce: out.bce,
            con: out.con,
            total: out.total,
            valid_micro_f1,
        })
    }

    /// Steps until `max_iters` iterations have run in total.
    pub fn run(&mut self) -> Result<Vec<HistoryRecord>> {
        self.run_until(self.cfg.max_iters)
    }

    pub fn run_until(&mut self, iterations: u64) -> Result<Vec<HistoryRecord>> {
        let mut history = Vec::new();
        while self.iteration < iterations {
            let rec = self.step()?;
            log::debug!(
                "iter {} bce {:.4} con {:.4} total {:.4}",
                rec.iteration,
                rec.bce,
                rec.con,
                rec.total
            );
            history.push(rec);
        }
        Ok(history)
    }

    /// The best validated state, or the current one when nothing was validated.
    pub fn best_state(&self) -> EncoderState {
        self.best
            .as_ref()
            .map_or_else(|| self.state.clone(), |b| b.model.clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_state: EncoderState,
    pub last_state: EncoderState,
    pub best_valid_micro_f1: Option<f64>,
    pub history: Vec<HistoryRecord>,
}

pub fn train(train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !valid.is_empty() && (valid.num_classes != train.num_classes || valid.vocab_size != train.vocab_size) {
        return Err(DennError::dims("train and valid headers disagree"));
    }
    let mut trainer = Trainer::new(cfg.clone(), train, &valid.samples)?;
    let history = trainer.run()?;
    Ok(TrainOutcome {
        best_state: trainer.best_state(),
        last_state: trainer.state.clone(),
        best_valid_micro_f1: trainer.best.as_ref().map(|b| b.valid_micro_f1),
        history,
    })
}

pub fn write_history(history: &[HistoryRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| DennError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in history {
        serde_json::to_writer(&mut out, rec).map_err(|e| DennError::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| DennError::io(path, e))?;
    }
    out.flush().map_err(|e| DennError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, DatasetConfig};

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn tiny_params(values: &[f64]) -> Params {
        let dims = EncoderDims {
            vocab_size: 1,
            hidden: 1,
            embed_dim: 1,
            num_classes: 1,
        };
        let mut p = Params::zeros(&dims);
        for (t, v) in p.tensors_mut().into_iter().zip(values) {
            t[0] = *v;
        }
        p
    }

    #[test]
    fn first_adam_step_is_signed_lr() {
        let mut p = tiny_params(&[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let before = p.clone();
        let g = tiny_params(&[0.3, -4.0, 1e-3, 0.0, 2.0, -0.7]);
        let mut adam = AdamState::new(&p);
        adam_step(&mut p, &g, &mut adam, hyper(0.01)).unwrap();
        for ((a, b), gg) in p.tensors().iter().zip(before.tensors()).zip(g.tensors()) {
            let expect = b[0] - 0.01 * gg[0] / (gg[0].abs() + 1e-8);
            assert!((a[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn two_parameter_hand_computed_steps() {
        // Two steps by hand from the Adam recurrences, g1 = (0.5, -1), g2 = (0.1, 2).
        let mut p = tiny_params(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut adam = AdamState::new(&p);
        let h = hyper(0.1);
        adam_step(&mut p, &tiny_params(&[0.5, -1.0, 0.0, 0.0, 0.0, 0.0]), &mut adam, h).unwrap();
        adam_step(&mut p, &tiny_params(&[0.1, 2.0, 0.0, 0.0, 0.0, 0.0]), &mut adam, h).unwrap();
        let expect = |g1: f64, g2: f64| {
            let m = 0.9 * (0.1 * g1) + 0.1 * g2;
            let v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
            let mh = m / (1.0 - 0.81);
            let vh = v / (1.0 - 0.999f64 * 0.999);
            1.0 - 0.1 * g1 / (g1.abs() + 1e-8) - 0.1 * mh / (vh.sqrt() + 1e-8)
        };
        assert!((p.w_in.data[0] - expect(0.5, 0.1)).abs() < 1e-12);
        assert!((p.b_in[0] - expect(-1.0, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = tiny_params(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut adam = AdamState::new(&p);
        adam_step(&mut p, &tiny_params(&[1.0; 6]), &mut adam, hyper(0.1)).unwrap();
        let snapshot = p.clone();
        let m_before = adam.m.w_in.data[0];
        adam_step(&mut p, &tiny_params(&[0.0; 6]), &mut adam, hyper(0.0)).unwrap();
        assert_eq!(p, snapshot);
        assert!((adam.m.w_in.data[0] - 0.9 * m_before).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = tiny_params(&[0.0; 6]);
        let mut adam = AdamState::new(&p);
        let g = tiny_params(&[2.0, -3.0, 0.5, 1.0, -1.0, 7.0]);
        let mut prev = p.clone();
        for _ in 0..200 {
            prev = p.clone();
            adam_step(&mut p, &g, &mut adam, hyper(0.01)).unwrap();
        }
        for ((a, b), gg) in p.tensors().iter().zip(prev.tensors()).zip(g.tensors()) {
            let delta = a[0] - b[0];
            assert!((delta + 0.01 * gg[0].signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = tiny_params(&[0.0; 6]);
        let other = Params::zeros(&EncoderDims {
            vocab_size: 2,
            hidden: 1,
            embed_dim: 1,
            num_classes: 1,
        });
        let mut adam = AdamState::new(&p);
        assert!(adam_step(&mut p, &other, &mut adam, hyper(0.1)).is_err());
    }

    fn small_data() -> (Dataset, Dataset) {
        let cfg = DatasetConfig {
            train_size: 64,
            valid_size: 32,
            test_size: 8,
            ..DatasetConfig::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        (s.train, s.valid)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-2,
            max_iters: 12,
            eval_every: 4,
            hidden: 16,
            embed_dim: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (train, valid) = small_data();
        let cfg = TrainConfig {
            alpha: 0.0,
            learning_rate: 0.0,
            ..quick_cfg()
        };
        let mut trainer = Trainer::new(cfg, &train, &valid.samples).unwrap();
        let init = trainer.state().clone();
        trainer.run().unwrap();
        assert_eq!(trainer.state().params, init.params);
    }

    #[test]
    fn training_is_deterministic() {
        let (train, valid) = small_data();
        let a = super::train(&train, &valid, &quick_cfg()).unwrap();
        let b = super::train(&train, &valid, &quick_cfg()).unwrap();
        assert_eq!(a.last_state, b.last_state);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 12);
        assert_eq!(a.history.iter().filter(|r| r.valid_micro_f1.is_some()).count(), 3);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let (mut train, valid) = small_data();
        train.samples.clear();
        assert!(super::train(&train, &valid, &quick_cfg()).is_err());
    }

    #[test]
    fn empty_valid_returns_last_state() {
        let (train, mut valid) = small_data();
        valid.samples.clear();
        let out = super::train(&train, &valid, &quick_cfg()).unwrap();
        assert_eq!(out.best_state, out.last_state);
        assert!(out.best_valid_micro_f1.is_none());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { tau1: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1e-3, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
