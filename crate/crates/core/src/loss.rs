//! Training objectives: label similarity, negative weights, binary
//! cross-entropy, the debiased contrastive loss (plus the UCL, SCL and WSCL
//! variants) and their closed-form gradients.
//!
//! # Batch layout
//!
//! A contrastive batch holds `2N` views. View `i < N` and view `i + N` are the
//! two dropout-augmented encodings of the same sample, so the positive of
//! anchor `i` is `(i + N) mod 2N`. Every view acts as an anchor.
//!
//! For anchor `i` with positive set `P(i)`, weights `w_ij` and temperature
//! `tau`:
//!
//! ```text
//! D_i   = sum_{j != i} w_ij exp(s_ij / tau)
//! L_i   = log D_i - (1 / |P(i)|) sum_{p in P(i)} s_ip / tau
//! P_ij  = w_ij exp(s_ij / tau) / D_i
//! dL_i / ds_ij = P_ij / tau - [j in P(i)] / (|P(i)| tau)
//! ```
//!
//! For DCL and UCL `P(i)` is the augmented view alone, which makes the
//! positive-pair gradient the negated sum of all negative-pair gradients. The
//! positive term stays in the denominator; its weight is 1 because a sample
//! always has label similarity 1 with its own view.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelVec;
use crate::error::{DennError, Result};
use crate::math::{l2_norm, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveVariant {
    /// Augmented view as the only positive, negatives weighted by `2 - l_ij`.
    Dcl,
    /// DCL with every weight fixed to 1.
    Ucl,
    /// Augmented view plus all samples with identical label vectors as
    /// positives, unit weights.
    Scl,
    /// SCL positives with DCL weights.
    Wscl,
}

impl ContrastiveVariant {
    pub const ALL: [ContrastiveVariant; 4] = [
        ContrastiveVariant::Ucl,
        ContrastiveVariant::Scl,
        ContrastiveVariant::Wscl,
        ContrastiveVariant::Dcl,
    ];

    fn weighted(self) -> bool {
        matches!(self, ContrastiveVariant::Dcl | ContrastiveVariant::Wscl)
    }

    fn supervised_positives(self) -> bool {
        matches!(self, ContrastiveVariant::Scl | ContrastiveVariant::Wscl)
    }
}

impl fmt::Display for ContrastiveVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastiveVariant::Dcl => "dcl",
            ContrastiveVariant::Ucl => "ucl",
            ContrastiveVariant::Scl => "scl",
            ContrastiveVariant::Wscl => "wscl",
        })
    }
}

impl FromStr for ContrastiveVariant {
    type Err = DennError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dcl" => Ok(ContrastiveVariant::Dcl),
            "ucl" => Ok(ContrastiveVariant::Ucl),
            "scl" => Ok(ContrastiveVariant::Scl),
            "wscl" => Ok(ContrastiveVariant::Wscl),
            other => Err(DennError::config(format!("unknown contrastive variant {other:?}"))),
        }
    }
}

/// Shared positives over the larger positive count.
///
/// Two all-zero vectors have similarity 0.
pub fn label_similarity(a: &LabelVec, b: &LabelVec) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let denom = a.count().max(b.count());
    if denom == 0 {
        log::warn!("label similarity of two empty label sets, using 0");
        return 0.0;
    }
    a.overlap(b) as f64 / denom as f64
}

/// `w = 1 + (1 - l)`.
pub fn contrastive_weight(l: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&l) {
        return Err(DennError::invalid(format!(
            "label similarity must lie in [0, 1], got {l}"
        )));
    }
    Ok(1.0 + (1.0 - l))
}

/// Summed binary cross-entropy from probabilities (clamped to
/// `[1e-12, 1 - 1e-12]`), and its gradient with respect to the logits.
pub fn bce_loss(y_hat: &[f64], y: &LabelVec) -> Result<(f64, Vec<f64>)> {
    if y_hat.len() != y.len() {
        return Err(DennError::dims(format!(
            "bce: {} probabilities for {} labels",
            y_hat.len(),
            y.len()
        )));
    }
    const EPS: f64 = 1e-12;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y_hat.len());
    for (&p, &t) in y_hat.iter().zip(y.bits()) {
        let q = p.clamp(EPS, 1.0 - EPS);
        loss -= if t { q.ln() } else { (1.0 - q).ln() };
        grad.push(p - if t { 1.0 } else { 0.0 });
    }
    Ok((loss, grad))
}

/// Summed binary cross-entropy evaluated directly from logits.
pub fn bce_with_logits(logits: &[f64], y: &LabelVec) -> Result<(f64, Vec<f64>)> {
    if logits.len() != y.len() {
        return Err(DennError::dims(format!(
            "bce: {} logits for {} labels",
            logits.len(),
            y.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(y.bits()) {
        let t = if t { 1.0 } else { 0.0 };
        // -[t log s(z) + (1-t) log(1-s(z))] = softplus(z) - t z
        loss += softplus(z) - t * z;
        grad.push(crate::math::sigmoid(z) - t);
    }
    Ok((loss, grad))
}

/// `bce + alpha * con`.
pub fn total_loss(bce: f64, con: f64, alpha: f64) -> f64 {
    bce + alpha * con
}

fn positive_of(i: usize, two_n: usize) -> usize {
    (i + two_n / 2) % two_n
}

fn check_batch(two_n: usize, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(DennError::invalid(format!("temperature must be > 0, got {tau}")));
    }
    if two_n < 2 || !two_n.is_multiple_of(2) {
        return Err(DennError::invalid(format!(
            "contrastive batch needs an even number >= 2 of views, got {two_n}"
        )));
    }
    Ok(())
}

/// `l_ij` over a `2N`-view batch; 1 on the diagonal and between the two views
/// of the same sample.
pub fn label_similarity_matrix(labels: &[LabelVec]) -> Result<Vec<Vec<f64>>> {
    let n = labels.len();
    if n < 2 || !n.is_multiple_of(2) {
        return Err(DennError::invalid(format!(
            "label similarity matrix needs an even number >= 2 of views, got {n}"
        )));
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = if j == i || j == positive_of(i, n) {
                1.0
            } else {
                label_similarity(&labels[i], &labels[j])
            };
            l[i][j] = v;
            l[j][i] = v;
        }
    }
    Ok(l)
}

/// `w_ij = 2 - l_ij` elementwise.
pub fn weight_matrix(l: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    l.iter()
        .map(|row| row.iter().map(|&x| contrastive_weight(x)).collect())
        .collect()
}

/// `P_ij` for one anchor. Entry `anchor` is 0, the rest sum to 1.
pub fn pij(similarities: &[f64], weights: &[f64], anchor: usize, tau: f64) -> Result<Vec<f64>> {
    if similarities.len() != weights.len() || anchor >= similarities.len() {
        return Err(DennError::dims("pij: row lengths or anchor index mismatch"));
    }
    if !(tau > 0.0) {
        return Err(DennError::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let (p, _) = pij_and_log_denominator(similarities, weights, anchor, tau);
    Ok(p)
}

fn pij_and_log_denominator(s: &[f64], w: &[f64], anchor: usize, tau: f64) -> (Vec<f64>, f64) {
    let max = s
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != anchor)
        .map(|(_, &x)| x / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = s
        .iter()
        .zip(w)
        .enumerate()
        .map(|(j, (&x, &wj))| if j == anchor { 0.0 } else { wj * (x / tau - max).exp() })
        .collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    (p, max + total.ln())
}

/// Loss value, per-anchor losses, and `dL/ds_ij` (row = anchor).
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
}

/// Core evaluation shared by every variant: explicit weights and positive
/// sets per anchor.
pub fn contrastive_from_parts(
    similarities: &[Vec<f64>],
    weights: &[Vec<f64>],
    positives: &[Vec<usize>],
    tau: f64,
) -> Result<ContrastiveOutput> {
    let n = similarities.len();
    check_batch(n, tau)?;
    if weights.len() != n
        || positives.len() != n
        || similarities.iter().chain(weights).any(|r| r.len() != n)
    {
        return Err(DennError::dims("contrastive: matrices must be 2N x 2N"));
    }
    let mut per_anchor = Vec::with_capacity(n);
    let mut grad = vec![vec![0.0; n]; n];
    for i in 0..n {
        let pos = &positives[i];
        if pos.is_empty() || pos.iter().any(|&p| p == i || p >= n) {
            return Err(DennError::invalid(format!("anchor {i}: invalid positive set")));
        }
        let (p, log_denom) = pij_and_log_denominator(&similarities[i], &weights[i], i, tau);
        let share = 1.0 / pos.len() as f64;
        let pos_term: f64 = pos.iter().map(|&q| similarities[i][q] / tau).sum::<f64>() * share;
        per_anchor.push(log_denom - pos_term);
        let row = &mut grad[i];
        for (j, g) in row.iter_mut().enumerate() {
            if j != i {
                *g = p[j] / tau;
            }
        }
        for &q in pos {
            row[q] = (p[q] - share) / tau;
        }
    }
    let loss = per_anchor.iter().sum();
    Ok(ContrastiveOutput {
        loss,
        per_anchor,
        grad,
    })
}

/// Positive sets for a variant.
pub fn positive_sets(labels: &[LabelVec], variant: ContrastiveVariant) -> Vec<Vec<usize>> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let own = positive_of(i, n);
            if variant.supervised_positives() {
                (0..n)
                    .filter(|&j| j != i && (j == own || labels[j] == labels[i]))
                    .collect()
            } else {
                vec![own]
            }
        })
        .collect()
}

/// Contrastive loss over a precomputed `2N x 2N` similarity matrix.
pub fn contrastive_loss_from_similarities(
    similarities: &[Vec<f64>],
    labels: &[LabelVec],
    tau: f64,
    variant: ContrastiveVariant,
) -> Result<ContrastiveOutput> {
    let n = similarities.len();
    check_batch(n, tau)?;
    if labels.len() != n {
        return Err(DennError::dims(format!(
            "contrastive: {} label vectors for {n} views",
            labels.len()
        )));
    }
    let weights = if variant.weighted() {
        weight_matrix(&label_similarity_matrix(labels)?)?
    } else {
        vec![vec![1.0; n]; n]
    };
    contrastive_from_parts(similarities, &weights, &positive_sets(labels, variant), tau)
}

/// DCL with a caller-supplied label similarity matrix.
pub fn dcl_with_label_similarity(
    similarities: &[Vec<f64>],
    label_sim: &[Vec<f64>],
    tau: f64,
) -> Result<ContrastiveOutput> {
    let n = similarities.len();
    check_batch(n, tau)?;
    let positives: Vec<Vec<usize>> = (0..n).map(|i| vec![positive_of(i, n)]).collect();
    contrastive_from_parts(similarities, &weight_matrix(label_sim)?, &positives, tau)
}

/// Raw (unclamped) pairwise cosine similarities.
pub fn similarity_matrix(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let norms = norms_of(embeddings)?;
    let n = embeddings.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = crate::math::dot(&embeddings[i], &embeddings[j]) / (norms[i] * norms[j]);
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    Ok(s)
}

fn norms_of(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = embeddings.first().map_or(0, |e| e.len());
    embeddings
        .iter()
        .map(|e| {
            if e.len() != d {
                return Err(DennError::dims("embeddings of differing lengths"));
            }
            let n = l2_norm(e);
            if n == 0.0 {
                Err(DennError::invalid("zero-norm embedding in contrastive batch"))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Chains `dL/ds_ij` through `s_ij = cos(h_i, h_j)` to `dL/dh`.
pub fn similarity_backward(embeddings: &[Vec<f64>], grad_s: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = embeddings.len();
    if grad_s.len() != n || grad_s.iter().any(|r| r.len() != n) {
        return Err(DennError::dims("similarity gradient must be n x n"));
    }
    let norms = norms_of(embeddings)?;
    let d = embeddings.first().map_or(0, |e| e.len());
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let g = grad_s[i][j];
            if i == j || g == 0.0 {
                continue;
            }
            let (hi, hj) = (&embeddings[i], &embeddings[j]);
            let inv = 1.0 / (norms[i] * norms[j]);
            let cos = crate::math::dot(hi, hj) * inv;
            let ci = cos / (norms[i] * norms[i]);
            let cj = cos / (norms[j] * norms[j]);
            for k in 0..d {
                out[i][k] += g * (hj[k] * inv - ci * hi[k]);
                out[j][k] += g * (hi[k] * inv - cj * hj[k]);
            }
        }
    }
    Ok(out)
}

/// Contrastive loss over embeddings, returning the similarity-space gradient.
pub fn contrastive_loss(
    embeddings: &[Vec<f64>],
    labels: &[LabelVec],
    tau: f64,
    variant: ContrastiveVariant,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let s = similarity_matrix(embeddings)?;
    let out = contrastive_loss_from_similarities(&s, labels, tau, variant)?;
    Ok((out.loss, out.grad))
}
