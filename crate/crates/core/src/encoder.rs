//! The sparse-input encoder and the linear classifier head.
//!
//! Architecture, for a sparse input `x`:
//!
//! ```text
//! a = act(W_in x + b_in)           hidden layer (tanh or relu)
//! a' = a * mask                    inverted dropout on the hidden layer only
//! h = W_emb a' + b_emb             embedding, not normalized
//! z = W_cls h + b_cls              classifier logits, y_clf = sigmoid(z)
//! ```
//!
//! Forward passes record a [`ForwardTrace`]; [`EncoderState::backward`]
//! consumes the trace together with upstream gradients on the embedding and
//! on the logits and returns gradients for every parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{DennError, Result};
use crate::math::{seeded_rng, sigmoid};

pub const CHECKPOINT_FORMAT: &str = "denn-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self * v`
    fn matvec(&self, v: &[f64], bias: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| bias[r] + self.row(r).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// `self^T * v`
    fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    /// `self += u v^T`
    fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        for (r, &ur) in u.iter().enumerate() {
            if ur == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, &vc) in row.iter_mut().zip(v) {
                *x += ur * vc;
            }
        }
    }
}

/// Every trainable tensor. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_emb: Matrix,
    pub b_emb: Vec<f64>,
    pub w_cls: Matrix,
    pub b_cls: Vec<f64>,
}

pub type ParameterGradients = Params;

impl Params {
    pub fn zeros(dims: &EncoderDims) -> Self {
        Params {
            w_in: Matrix::zeros(dims.hidden, dims.vocab_size),
            b_in: vec![0.0; dims.hidden],
            w_emb: Matrix::zeros(dims.embed_dim, dims.hidden),
            b_emb: vec![0.0; dims.embed_dim],
            w_cls: Matrix::zeros(dims.num_classes, dims.embed_dim),
            b_cls: vec![0.0; dims.num_classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            w_in: Matrix::zeros(self.w_in.rows, self.w_in.cols),
            b_in: vec![0.0; self.b_in.len()],
            w_emb: Matrix::zeros(self.w_emb.rows, self.w_emb.cols),
            b_emb: vec![0.0; self.b_emb.len()],
            w_cls: Matrix::zeros(self.w_cls.rows, self.w_cls.cols),
            b_cls: vec![0.0; self.b_cls.len()],
        }
    }

    /// Tensors in a fixed order: w_in, b_in, w_emb, b_emb, w_cls, b_cls.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.w_in.data,
            &self.b_in,
            &self.w_emb.data,
            &self.b_emb,
            &self.w_cls.data,
            &self.b_cls,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.w_in.data,
            &mut self.b_in,
            &mut self.w_emb.data,
            &mut self.b_emb,
            &mut self.w_cls.data,
            &mut self.b_cls,
        ]
    }

    pub fn tensor_names() -> [&'static str; 6] {
        ["w_in", "b_in", "w_emb", "b_emb", "w_cls", "b_cls"]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.len() == b.len())
            && self.w_in.rows == other.w_in.rows
            && self.w_emb.rows == other.w_emb.rows
            && self.w_cls.rows == other.w_cls.rows
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    On,
    Off,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<(u32, f64)>,
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    /// 0 for dropped units, `1 / (1 - rate)` for kept ones.
    pub mask: Vec<f64>,
    pub dropped: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// Elementwise sigmoid of the logits.
    pub fn classify(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Encoder and classifier parameters plus their fixed hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub dims: EncoderDims,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub seed: u64,
    pub params: Params,
}

impl EncoderState {
    /// Every parameter drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn init(dims: EncoderDims, activation: Activation, dropout_rate: f64, seed: u64) -> Result<Self> {
        let mut state = Self::zeros(dims, activation, dropout_rate)?;
        state.seed = seed;
        let mut rng = seeded_rng(seed);
        let fans = [
            dims.vocab_size,
            dims.vocab_size,
            dims.hidden,
            dims.hidden,
            dims.embed_dim,
            dims.embed_dim,
        ];
        for (t, fan_in) in state.params.tensors_mut().into_iter().zip(fans) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in t.iter_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
        Ok(state)
    }

    pub fn zeros(dims: EncoderDims, activation: Activation, dropout_rate: f64) -> Result<Self> {
        if dims.vocab_size == 0 || dims.hidden == 0 || dims.embed_dim == 0 || dims.num_classes == 0 {
            return Err(DennError::config("encoder dimensions must all be >= 1"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(DennError::config(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        Ok(EncoderState {
            dims,
            activation,
            dropout_rate,
            seed: 0,
            params: Params::zeros(&dims),
        })
    }

    /// Draws a fresh inverted-dropout mask over the hidden layer.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let p = self.dropout_rate;
        if p == 0.0 {
            return vec![1.0; self.dims.hidden];
        }
        let keep = 1.0 / (1.0 - p);
        (0..self.dims.hidden)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        features: &[(u32, f64)],
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        match mode {
            DropoutMode::On => {
                let mask = self.sample_mask(rng);
                self.forward_with_mask(features, &mask)
            }
            DropoutMode::Off => self.forward_with_mask(features, &vec![1.0; self.dims.hidden]),
        }
    }

    /// Deterministic evaluation-mode forward pass (no dropout).
    pub fn forward_eval(&self, features: &[(u32, f64)]) -> Result<ForwardTrace> {
        self.forward_with_mask(features, &vec![1.0; self.dims.hidden])
    }

    pub fn embed(&self, sample: &Sample) -> Result<Vec<f64>> {
        Ok(self.forward_eval(sample.features())?.embedding)
    }

    pub fn forward_with_mask(&self, features: &[(u32, f64)], mask: &[f64]) -> Result<ForwardTrace> {
        let d = &self.dims;
        if mask.len() != d.hidden {
            return Err(DennError::dims(format!(
                "dropout mask has {} entries, hidden layer has {}",
                mask.len(),
                d.hidden
            )));
        }
        let p = &self.params;
        let mut pre_hidden = p.b_in.clone();
        for &(i, v) in features {
            let i = i as usize;
            if i >= d.vocab_size {
                return Err(DennError::dims(format!(
                    "feature index {i} >= vocab size {}",
                    d.vocab_size
                )));
            }
            for (j, acc) in pre_hidden.iter_mut().enumerate() {
                *acc += p.w_in.at(j, i) * v;
            }
        }
        let hidden: Vec<f64> = pre_hidden.iter().map(|&x| self.activation.apply(x)).collect();
        let dropped: Vec<f64> = hidden.iter().zip(mask).map(|(a, m)| a * m).collect();
        let embedding = p.w_emb.matvec(&dropped, &p.b_emb);
        let logits = p.w_cls.matvec(&embedding, &p.b_cls);
        Ok(ForwardTrace {
            input: features.to_vec(),
            pre_hidden,
            hidden,
            mask: mask.to_vec(),
            dropped,
            embedding,
            logits,
        })
    }

    /// Gradients of a loss whose upstream derivatives are `grad_embedding`
    /// (contrastive path) and `grad_logits` (classification path).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_embedding: &[f64],
        grad_logits: &[f64],
    ) -> Result<ParameterGradients> {
        let mut grads = Params::zeros(&self.dims);
        self.accumulate_backward(trace, grad_embedding, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Same as [`backward`](Self::backward) but adds into `grads`.
    pub fn accumulate_backward(
        &self,
        trace: &ForwardTrace,
        grad_embedding: &[f64],
        grad_logits: &[f64],
        grads: &mut ParameterGradients,
    ) -> Result<()> {
        let d = &self.dims;
        if grad_embedding.len() != d.embed_dim || grad_logits.len() != d.num_classes {
            return Err(DennError::dims(format!(
                "upstream gradients ({}, {}) do not match (embed_dim {}, classes {})",
                grad_embedding.len(),
                grad_logits.len(),
                d.embed_dim,
                d.num_classes
            )));
        }
        if trace.embedding.len() != d.embed_dim || trace.hidden.len() != d.hidden {
            return Err(DennError::dims("trace does not match encoder dimensions"));
        }
        if !grads.same_shape(&self.params) {
            return Err(DennError::dims("gradient buffer does not match parameters"));
        }
        let p = &self.params;

        grads.w_cls.add_outer(grad_logits, &trace.embedding);
        for (g, dz) in grads.b_cls.iter_mut().zip(grad_logits) {
            *g += dz;
        }

        let mut d_emb = p.w_cls.matvec_t(grad_logits);
        for (a, b) in d_emb.iter_mut().zip(grad_embedding) {
            *a += b;
        }
        grads.w_emb.add_outer(&d_emb, &trace.dropped);
        for (g, dh) in grads.b_emb.iter_mut().zip(&d_emb) {
            *g += dh;
        }

        let d_dropped = p.w_emb.matvec_t(&d_emb);
        let d_pre: Vec<f64> = d_dropped
            .iter()
            .zip(&trace.mask)
            .zip(trace.pre_hidden.iter().zip(&trace.hidden))
            .map(|((g, m), (&x, &y))| g * m * self.activation.derivative(x, y))
            .collect();
        for (g, dp) in grads.b_in.iter_mut().zip(&d_pre) {
            *g += dp;
        }
        let vocab = d.vocab_size;
        for &(i, v) in &trace.input {
            let i = i as usize;
            for (j, dp) in d_pre.iter().enumerate() {
                grads.w_in.data[j * vocab + i] += dp * v;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| DennError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let ckpt = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            model: self,
        };
        serde_json::to_writer(&mut out, &ckpt).map_err(|e| DennError::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| DennError::io(path, e))?;
        out.flush().map_err(|e| DennError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| DennError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| DennError::Format(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint_value(value)
    }

    pub fn from_checkpoint_value(value: serde_json::Value) -> Result<Self> {
        if value.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(DennError::Format("not a model checkpoint (format tag)".into()));
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(DennError::Format(format!(
                    "unsupported checkpoint version {other:?}"
                )))
            }
        }
        let ckpt: Checkpoint = serde_json::from_value(value)
            .map_err(|e| DennError::Format(format!("checkpoint body: {e}")))?;
        let state = ckpt.model;
        state.check_consistent()?;
        Ok(state)
    }

    fn check_consistent(&self) -> Result<()> {
        let fresh = Params::zeros(&self.dims);
        if !fresh.same_shape(&self.params) {
            return Err(DennError::Format(
                "parameter tensor shapes disagree with recorded dims".into(),
            ));
        }
        if !self.params.is_finite() {
            return Err(DennError::Format("non-finite parameter".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(DennError::Format("dropout rate out of range".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    model: &'a EncoderState,
}

#[derive(Deserialize)]
struct Checkpoint {
    #[allow(dead_code)]
    format: String,
    #[allow(dead_code)]
    version: u32,
    model: EncoderState,
}
