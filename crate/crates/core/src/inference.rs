//! kNN-augmented prediction with debiased confidence.
//!
//! Per test sample: a dropout-off forward pass gives the embedding and the
//! classifier probabilities `y_clf`; the top-k neighbors in the datastore
//! give `y_knn`, a softmax(similarity / tau2)-weighted average of their label
//! vectors. Labels with `y_clf >= gamma` form the high-confidence subset, and
//! the smallest `y_knn` over that subset becomes the mixing weight `lambda`
//! of `y_final = lambda * y_knn + (1 - lambda) * y_clf`. An empty subset
//! yields `lambda = 0`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelVec, Sample};
use crate::datastore::{Datastore, Neighbor};
use crate::encoder::EncoderState;
use crate::error::{DennError, Result};
use crate::math::softmax_temp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Denn,
    ClassifierOnly,
    KnnOnly,
    FixedLambda,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Denn => "denn",
            InferenceMode::ClassifierOnly => "classifier_only",
            InferenceMode::KnnOnly => "knn_only",
            InferenceMode::FixedLambda => "fixed_lambda",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = DennError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denn" => Ok(InferenceMode::Denn),
            "classifier_only" => Ok(InferenceMode::ClassifierOnly),
            "knn_only" => Ok(InferenceMode::KnnOnly),
            "fixed_lambda" => Ok(InferenceMode::FixedLambda),
            other => Err(DennError::config(format!("unknown inference mode {other:?}"))),
        }
    }
}

/// How the kNN probabilities over the high-confidence subset are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaReduction {
    Min,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub k: usize,
    pub tau2: f64,
    pub gamma: f64,
    pub mode: InferenceMode,
    /// Used only in `fixed_lambda` mode.
    pub fixed_lambda: f64,
    pub decision_threshold: f64,
    pub lambda_reduction: LambdaReduction,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            k: 30,
            tau2: 0.05,
            gamma: 0.7,
            mode: InferenceMode::Denn,
            fixed_lambda: 0.5,
            decision_threshold: 0.5,
            lambda_reduction: LambdaReduction::Min,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DennError::config(format!("inference: {m}")));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.tau2 > 0.0) || !self.tau2.is_finite() {
            return bad(format!("tau2 must be > 0, got {}", self.tau2));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.fixed_lambda) {
            return bad(format!("fixed_lambda must lie in [0, 1], got {}", self.fixed_lambda));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return bad(format!(
                "decision_threshold must lie in (0, 1), got {}",
                self.decision_threshold
            ));
        }
        Ok(())
    }
}

/// `sum_i beta_i y_i` with `beta = softmax(similarities / tau2)`.
pub fn knn_predict(neighbors: &[Neighbor], tau2: f64) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(DennError::invalid("kNN prediction needs at least one neighbor"));
    }
    let sims: Vec<f64> = neighbors.iter().map(|n| n.similarity).collect();
    let beta = softmax_temp(&sims, tau2)?;
    let c = neighbors[0].labels.len();
    let mut out = vec![0.0; c];
    for (n, b) in neighbors.iter().zip(&beta) {
        if n.labels.len() != c {
            return Err(DennError::dims("neighbors carry label vectors of different widths"));
        }
        for k in n.labels.positives() {
            out[k] += b;
        }
    }
    // Guard the [0, 1] bound against round-off in the weight sum.
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// `1[y_clf >= gamma]` per class.
pub fn high_confidence_subset(y_clf: &[f64], gamma: f64) -> Vec<bool> {
    y_clf.iter().map(|&p| p >= gamma).collect()
}

/// Minimum of `y_knn` over the masked-in classes, 0 for an empty mask.
pub fn debiased_lambda(y_knn: &[f64], mask: &[bool]) -> Result<f64> {
    lambda_with(y_knn, mask, LambdaReduction::Min)
}

pub fn lambda_with(y_knn: &[f64], mask: &[bool], reduction: LambdaReduction) -> Result<f64> {
    if y_knn.len() != mask.len() {
        return Err(DennError::dims(format!(
            "mask width {} vs {} kNN probabilities",
            mask.len(),
            y_knn.len()
        )));
    }
    let selected = y_knn.iter().zip(mask).filter(|(_, &m)| m).map(|(&p, _)| p);
    let lambda = match reduction {
        LambdaReduction::Min => selected.fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.min(p)))),
        LambdaReduction::Mean => {
            let (sum, n) = selected.fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
            (n > 0).then(|| sum / n as f64)
        }
    };
    Ok(lambda.unwrap_or(0.0).clamp(0.0, 1.0))
}

/// `lambda * y_knn + (1 - lambda) * y_clf`.
pub fn combine(lambda: f64, y_knn: &[f64], y_clf: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DennError::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if y_knn.len() != y_clf.len() {
        return Err(DennError::dims("kNN and classifier predictions differ in width"));
    }
    Ok(y_knn
        .iter()
        .zip(y_clf)
        .map(|(&a, &b)| (lambda * a + (1.0 - lambda) * b).clamp(0.0, 1.0))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    pub y_clf: Vec<f64>,
    pub y_knn: Vec<f64>,
    pub high_conf_mask: Vec<bool>,
    pub lambda: f64,
    pub y_final: Vec<f64>,
    pub neighbors: Vec<Neighbor>,
}

impl PredictionBundle {
    pub fn decide(&self, threshold: f64) -> LabelVec {
        LabelVec::from_bools(self.y_final.iter().map(|&p| p >= threshold).collect())
    }
}

/// Combination step alone, given both predictions.
pub fn combine_predictions(y_clf: Vec<f64>, y_knn: Vec<f64>, neighbors: Vec<Neighbor>, cfg: &InferenceConfig) -> Result<PredictionBundle> {
    let mask = high_confidence_subset(&y_clf, cfg.gamma);
    let lambda = match cfg.mode {
        InferenceMode::Denn => lambda_with(&y_knn, &mask, cfg.lambda_reduction)?,
        InferenceMode::ClassifierOnly => 0.0,
        InferenceMode::KnnOnly => 1.0,
        InferenceMode::FixedLambda => cfg.fixed_lambda,
    };
    let y_final = combine(lambda, &y_knn, &y_clf)?;
    Ok(PredictionBundle {
        y_clf,
        y_knn,
        high_conf_mask: mask,
        lambda,
        y_final,
        neighbors,
    })
}

pub fn predict(state: &EncoderState, store: &Datastore, sample: &Sample, cfg: &InferenceConfig) -> Result<PredictionBundle> {
    if store.dim() != state.dims.embed_dim || store.num_classes() != state.dims.num_classes {
        return Err(DennError::dims(format!(
            "store is ({}, {}), model is ({}, {})",
            store.dim(),
            store.num_classes(),
            state.dims.embed_dim,
            state.dims.num_classes
        )));
    }
    let trace = state.forward_eval(sample.features())?;
    let y_clf = trace.classify();
    let neighbors = store.retrieve_topk(&trace.embedding, cfg.k)?;
    let y_knn = knn_predict(&neighbors, cfg.tau2)?;
    combine_predictions(y_clf, y_knn, neighbors, cfg)
}

/// [`predict`] over many samples in parallel; output order matches input.
pub fn predict_all(
    state: &EncoderState,
    store: &Datastore,
    samples: &[Sample],
    cfg: &InferenceConfig,
) -> Result<Vec<PredictionBundle>> {
    cfg.validate()?;
    samples
        .par_iter()
        .map(|s| predict(state, store, s, cfg))
        .collect()
}

/// Serialized form of one prediction (one JSON line per sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    /// Predicted positive labels (`y_final >= decision_threshold`).
    pub labels: Vec<usize>,
    pub lambda: f64,
    pub y_final: Vec<f64>,
    pub y_clf: Vec<f64>,
    pub y_knn: Vec<f64>,
    pub high_confidence: Vec<usize>,
    pub neighbors: Vec<NeighborRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub index: usize,
    pub similarity: f64,
}

impl PredictionRecord {
    pub fn new(id: &str, bundle: &PredictionBundle, threshold: f64) -> Self {
        PredictionRecord {
            id: id.to_string(),
            labels: bundle.decide(threshold).positives(),
            lambda: bundle.lambda,
            y_final: bundle.y_final.clone(),
            y_clf: bundle.y_clf.clone(),
            y_knn: bundle.y_knn.clone(),
            high_confidence: bundle
                .high_conf_mask
                .iter()
                .enumerate()
                .filter_map(|(c, &m)| m.then_some(c))
                .collect(),
            neighbors: bundle
                .neighbors
                .iter()
                .map(|n| NeighborRecord {
                    index: n.index,
                    similarity: n.similarity,
                })
                .collect(),
        }
    }
}

pub const PREDICTIONS_FORMAT: &str = "denn-predictions";

/// First line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsHeader {
    pub format: String,
    pub num_classes: usize,
    pub inference: InferenceConfig,
}

impl PredictionsHeader {
    pub fn new(num_classes: usize, inference: &InferenceConfig) -> Self {
        PredictionsHeader {
            format: PREDICTIONS_FORMAT.into(),
            num_classes,
            inference: inference.clone(),
        }
    }
}

pub fn write_predictions(path: &Path, header: &PredictionsHeader, records: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| DennError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let json_err = |e: serde_json::Error| DennError::io(path, e.into());
    serde_json::to_writer(&mut out, header).map_err(json_err)?;
    out.write_all(b"\n").map_err(|e| DennError::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(json_err)?;
        out.write_all(b"\n").map_err(|e| DennError::io(path, e))?;
    }
    out.flush().map_err(|e| DennError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<(PredictionsHeader, Vec<PredictionRecord>)> {
    let file = File::open(path).map_err(|e| DennError::io(path, e))?;
    let parse_err = |line: usize, message: String| DennError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header: Option<PredictionsHeader> = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DennError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(h) = &header else {
            let h: PredictionsHeader =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 1, format!("bad header: {e}")))?;
            if h.format != PREDICTIONS_FORMAT {
                return Err(parse_err(i + 1, format!("unexpected format tag {:?}", h.format)));
            }
            header = Some(h);
            continue;
        };
        let r: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 1, format!("bad record: {e}")))?;
        if let Some(&c) = r.labels.iter().find(|&&c| c >= h.num_classes) {
            return Err(parse_err(i + 1, format!("label index {c} >= num_classes {}", h.num_classes)));
        }
        records.push(r);
    }
    let header = header.ok_or_else(|| parse_err(1, "missing header line".into()))?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(sim: f64, labels: &[usize], c: usize) -> Neighbor {
        Neighbor {
            index: 0,
            similarity: sim,
            labels: LabelVec::from_indices(c, labels).unwrap(),
        }
    }

    #[test]
    fn knn_uniform_weights() {
        let n = vec![nb(0.5, &[0], 2), nb(0.5, &[0, 1], 2), nb(0.5, &[1], 2)];
        let y = knn_predict(&n, 0.05).unwrap();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn knn_unanimous_label_is_one() {
        let n = vec![nb(0.9, &[1], 3), nb(0.1, &[1, 2], 3), nb(-0.4, &[0, 1], 3)];
        assert_eq!(knn_predict(&n, 0.05).unwrap()[1], 1.0);
    }

    #[test]
    fn knn_softmax_weights() {
        let n = vec![nb(0.1, &[0], 2), nb(0.0, &[1], 2)];
        let y = knn_predict(&n, 0.05).unwrap();
        assert!((y[0] - 0.880_797_077_977_882_3).abs() < 1e-8);
        assert!((y[1] - 0.119_202_922_022_117_6).abs() < 1e-8);
        assert!(knn_predict(&[], 0.05).is_err());
    }

    #[test]
    fn mask_examples() {
        assert_eq!(high_confidence_subset(&[0.9, 0.75, 0.3], 0.7), vec![true, true, false]);
        assert_eq!(high_confidence_subset(&[0.7], 0.7), vec![true]);
        assert_eq!(high_confidence_subset(&[0.1, 0.69], 0.7), vec![false, false]);
    }

    #[test]
    fn lambda_examples() {
        let y = [0.8, 0.5, 0.1];
        assert_eq!(debiased_lambda(&y, &[true, true, false]).unwrap(), 0.5);
        assert_eq!(debiased_lambda(&y, &[false; 3]).unwrap(), 0.0);
        assert_eq!(debiased_lambda(&[1.0, 1.0, 0.2], &[true, true, false]).unwrap(), 1.0);
        assert!((lambda_with(&y, &[true, true, false], LambdaReduction::Mean).unwrap() - 0.65).abs() < 1e-15);
        assert!(debiased_lambda(&y, &[true]).is_err());
    }

    #[test]
    fn combine_examples() {
        let knn = [0.8, 0.5, 0.1];
        let clf = [0.9, 0.75, 0.3];
        assert_eq!(combine(0.0, &knn, &clf).unwrap(), clf.to_vec());
        assert_eq!(combine(1.0, &knn, &clf).unwrap(), knn.to_vec());
        let mid = combine(0.5, &knn, &clf).unwrap();
        for (a, b) in mid.iter().zip([0.85, 0.625, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(combine(1.5, &knn, &clf).is_err());
    }

    #[test]
    fn hand_built_bundle() {
        let cfg = InferenceConfig::default();
        let b = combine_predictions(vec![0.9, 0.75, 0.3], vec![0.8, 0.5, 0.1], vec![], &cfg).unwrap();
        assert_eq!(b.high_conf_mask, vec![true, true, false]);
        assert_eq!(b.lambda, 0.5);
        // Bit-exact against the formula in f64; 0.85 itself is one ulp away.
        assert_eq!(b.y_final, vec![0.5 * 0.8 + 0.5 * 0.9, 0.625, 0.2]);
        for (a, e) in b.y_final.iter().zip([0.85, 0.625, 0.2]) {
            assert!((a - e).abs() <= 2.0 * f64::EPSILON);
        }
    }

    #[test]
    fn predictions_file_round_trip() {
        let cfg = InferenceConfig::default();
        let b = combine_predictions(vec![0.9, 0.75, 0.3], vec![0.8, 0.5, 0.1], vec![nb(0.25, &[0], 3)], &cfg).unwrap();
        let rec = PredictionRecord::new("s1", &b, 0.5);
        assert_eq!(rec.labels, vec![0, 1]);
        assert_eq!(rec.high_confidence, vec![0, 1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let header = PredictionsHeader::new(3, &cfg);
        write_predictions(&path, &header, &[rec.clone()]).unwrap();
        let (h, recs) = read_predictions(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(recs, vec![rec]);

        std::fs::write(&path, "{\"num_classes\":3,\"vocab_size\":4}\n").unwrap();
        assert!(matches!(read_predictions(&path), Err(DennError::Parse { line: 1, .. })));
    }

    #[test]
    fn config_validation() {
        InferenceConfig::default().validate().unwrap();
        for bad in [
            InferenceConfig { k: 0, ..Default::default() },
            InferenceConfig { tau2: 0.0, ..Default::default() },
            InferenceConfig { gamma: 1.0, ..Default::default() },
            InferenceConfig { fixed_lambda: 1.2, ..Default::default() },
            InferenceConfig { decision_threshold: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("knn_only".parse::<InferenceMode>().unwrap(), InferenceMode::KnnOnly);
        assert!("both".parse::<InferenceMode>().is_err());
    }
}
