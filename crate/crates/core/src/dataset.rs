//! Samples, the line-delimited dataset format, the synthetic generator and
//! label-frequency grouping.
//!
//! # File format
//!
//! A dataset file is UTF-8 text, one JSON object per line. The first line is
//! a header, every following line is one sample:
//!
//! ```text
//! {"num_classes":4,"vocab_size":10}
//! {"id":"train-0","features":{"1":0.5,"7":0.25},"labels":[0,2]}
//! {"id":"train-1","features":{"3":1.0},"labels":[3]}
//! ```
//!
//! `features` maps a feature index (`< vocab_size`) to its value, `labels`
//! lists the positive label indices (`< num_classes`). Blank lines are
//! skipped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DennError, Result};
use crate::math::{stream_rng, DennRng};

/// Binary label vector of fixed width `C`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVec(Vec<bool>);

impl LabelVec {
    pub fn zeros(num_classes: usize) -> Self {
        LabelVec(vec![false; num_classes])
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        LabelVec(bits)
    }

    pub fn from_indices(num_classes: usize, positives: &[usize]) -> Result<Self> {
        let mut bits = vec![false; num_classes];
        for &c in positives {
            if c >= num_classes {
                return Err(DennError::invalid(format!(
                    "label index {c} out of range for {num_classes} classes"
                )));
            }
            bits[c] = true;
        }
        Ok(LabelVec(bits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, c: usize) -> bool {
        self.0[c]
    }

    pub fn set(&mut self, c: usize, on: bool) {
        self.0[c] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// Number of positive labels (the l1 norm).
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(c, &b)| b.then_some(c))
            .collect()
    }

    /// Number of labels positive in both vectors.
    pub fn overlap(&self, other: &LabelVec) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// A sparse feature vector plus its gold labels.
///
/// Features are kept sorted by index with no duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    features: Vec<(u32, f64)>,
    pub labels: LabelVec,
}

impl Sample {
    pub fn new(id: impl Into<String>, features: Vec<(u32, f64)>, labels: LabelVec) -> Result<Self> {
        let mut features = features;
        features.sort_by_key(|&(i, _)| i);
        if features.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(DennError::invalid("duplicate feature index"));
        }
        if features.iter().any(|(_, v)| !v.is_finite()) {
            return Err(DennError::invalid("non-finite feature value"));
        }
        Ok(Sample {
            id: id.into(),
            features,
            labels,
        })
    }

    pub fn features(&self) -> &[(u32, f64)] {
        &self.features
    }

    /// Largest feature index + 1, or 0 for an empty feature vector.
    pub fn min_vocab(&self) -> usize {
        self.features.last().map_or(0, |&(i, _)| i as usize + 1)
    }
}

/// A header plus its samples, as stored in a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    num_classes: usize,
    vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    features: BTreeMap<u32, f64>,
    labels: Vec<usize>,
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| DennError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| DennError::io(path, e);
    let header = Header {
        num_classes: dataset.num_classes,
        vocab_size: dataset.vocab_size,
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| DennError::io(path, e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for s in &dataset.samples {
        let rec = Record {
            id: s.id.clone(),
            features: s.features.iter().copied().collect(),
            labels: s.labels.positives(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| DennError::io(path, e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| DennError::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| DennError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut header: Option<Header> = None;
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DennError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(h) = &header else {
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
            if h.num_classes == 0 || h.vocab_size == 0 {
                return Err(parse_err(lineno, "header counts must be >= 1".into()));
            }
            header = Some(h);
            continue;
        };
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| parse_err(lineno, format!("bad record: {e}")))?;
        if let Some(&c) = rec.labels.iter().find(|&&c| c >= h.num_classes) {
            return Err(parse_err(
                lineno,
                format!("label index {c} >= num_classes {}", h.num_classes),
            ));
        }
        if let Some((&f, _)) = rec.features.iter().find(|(&f, _)| f as usize >= h.vocab_size) {
            return Err(parse_err(
                lineno,
                format!("feature index {f} >= vocab_size {}", h.vocab_size),
            ));
        }
        let labels = LabelVec::from_indices(h.num_classes, &rec.labels)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        let sample = Sample::new(rec.id, rec.features.into_iter().collect(), labels)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        samples.push(sample);
    }
    let header = header.ok_or_else(|| parse_err(1, "missing header line".into()))?;
    Ok(Dataset {
        num_classes: header.num_classes,
        vocab_size: header.vocab_size,
        samples,
    })
}

/// Parameters of the synthetic generator.
///
/// Labels are split round-robin over `num_clusters` clusters. Each cluster
/// owns `prototypes_per_cluster` prototypes: prototype 0 carries exactly the
/// cluster's label set, the others are variants that drop one of those labels
/// and may borrow one label from another cluster. Every prototype also owns a
/// few random "signature" feature indices. A sample picks a cluster (with a
/// Zipf-like skew), then a prototype, then draws `words_per_sample` tokens:
/// with probability `signal` from its prototype (half signature indices, half
/// the topic indices of its labels), otherwise uniformly from the vocabulary.
/// Features are the normalized token counts. `label_noise` is the probability
/// that one uniformly chosen label of the sample is flipped after drawing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub num_clusters: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub vocab_size: usize,
    pub label_noise: f64,
    pub seed: u64,
    pub prototypes_per_cluster: usize,
    pub signature_words: usize,
    pub words_per_sample: usize,
    pub signal: f64,
    pub cross_label_prob: f64,
    pub cluster_skew: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 12,
            num_clusters: 4,
            train_size: 2000,
            valid_size: 500,
            test_size: 500,
            vocab_size: 240,
            label_noise: 0.1,
            seed: 1,
            prototypes_per_cluster: 4,
            signature_words: 6,
            words_per_sample: 24,
            signal: 0.5,
            cross_label_prob: 0.5,
            cluster_skew: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DennError::config(format!("dataset: {m}")));
        if self.num_classes == 0 || self.num_clusters == 0 {
            return bad("num_classes and num_clusters must be >= 1");
        }
        if self.num_clusters > self.num_classes {
            return bad("num_clusters must not exceed num_classes");
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 {
            return bad("split sizes must be >= 1");
        }
        if self.vocab_size == 0 || self.words_per_sample == 0 || self.prototypes_per_cluster == 0 {
            return bad("vocab_size, words_per_sample and prototypes_per_cluster must be >= 1");
        }
        for (name, p) in [
            ("label_noise", self.label_noise),
            ("signal", self.signal),
            ("cross_label_prob", self.cross_label_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.cluster_skew >= 0.0) || !self.cluster_skew.is_finite() {
            return bad("cluster_skew must be a finite value >= 0");
        }
        Ok(())
    }

    /// Labels owned by cluster `k`.
    pub fn cluster_labels(&self, k: usize) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|c| c % self.num_clusters == k)
            .collect()
    }
}

struct Prototype {
    labels: LabelVec,
    signature: Vec<u32>,
}

/// The three splits produced by [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn generate_synthetic(cfg: &DatasetConfig) -> Result<Splits> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let c_total = cfg.num_classes;

    // Topic indices per label: a contiguous block of the vocabulary.
    let block = (cfg.vocab_size / c_total).max(1);
    let topic = |c: usize| -> Vec<u32> {
        (0..block)
            .map(|j| ((c * block + j) % cfg.vocab_size) as u32)
            .collect()
    };

    let mut prototypes: Vec<Vec<Prototype>> = Vec::with_capacity(cfg.num_clusters);
    for k in 0..cfg.num_clusters {
        let own = cfg.cluster_labels(k);
        let mut protos = Vec::with_capacity(cfg.prototypes_per_cluster);
        for p in 0..cfg.prototypes_per_cluster {
            let mut labels = LabelVec::from_indices(c_total, &own)?;
            if p > 0 {
                if own.len() > 1 {
                    let drop = own[rng.random_range(0..own.len())];
                    labels.set(drop, false);
                }
                if c_total > own.len() && rng.random_bool(cfg.cross_label_prob) {
                    let foreign: Vec<usize> = (0..c_total).filter(|c| !own.contains(c)).collect();
                    labels.set(foreign[rng.random_range(0..foreign.len())], true);
                }
            }
            let signature = (0..cfg.signature_words)
                .map(|_| rng.random_range(0..cfg.vocab_size) as u32)
                .collect();
            protos.push(Prototype { labels, signature });
        }
        prototypes.push(protos);
    }

    let weights: Vec<f64> = (0..cfg.num_clusters)
        .map(|k| 1.0 / ((k + 1) as f64).powf(cfg.cluster_skew))
        .collect();
    let total_w: f64 = weights.iter().sum();

    let topics: Vec<Vec<u32>> = (0..c_total).map(topic).collect();
    let draw_split = |name: &str, n: usize, rng: &mut DennRng| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut u = rng.random::<f64>() * total_w;
            let mut k = cfg.num_clusters - 1;
            for (j, w) in weights.iter().enumerate() {
                if u < *w {
                    k = j;
                    break;
                }
                u -= w;
            }
            let proto = &prototypes[k][rng.random_range(0..cfg.prototypes_per_cluster)];
            let positives = proto.labels.positives();

            let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
            for _ in 0..cfg.words_per_sample {
                let word = if rng.random_bool(cfg.signal) {
                    if proto.signature.is_empty() || rng.random_bool(0.5) {
                        let c = positives[rng.random_range(0..positives.len())];
                        *topics[c].choose(rng).expect("topic blocks are nonempty")
                    } else {
                        *proto.signature.choose(rng).expect("checked nonempty")
                    }
                } else {
                    rng.random_range(0..cfg.vocab_size) as u32
                };
                *counts.entry(word).or_insert(0.0) += 1.0;
            }
            let scale = 1.0 / cfg.words_per_sample as f64;
            let features = counts.into_iter().map(|(w, n)| (w, n * scale)).collect();

            let mut labels = proto.labels.clone();
            if cfg.label_noise > 0.0 && rng.random_bool(cfg.label_noise) {
                let c = rng.random_range(0..c_total);
                // Never leave a sample without labels.
                if !(labels.get(c) && labels.count() == 1) {
                    labels.set(c, !labels.get(c));
                }
            }
            samples.push(Sample::new(format!("{name}-{i}"), features, labels)?);
        }
        Ok(Dataset {
            num_classes: c_total,
            vocab_size: cfg.vocab_size,
            samples,
        })
    };

    let mut rng_train = stream_rng(cfg.seed, 1);
    let mut rng_valid = stream_rng(cfg.seed, 2);
    let mut rng_test = stream_rng(cfg.seed, 3);
    Ok(Splits {
        train: draw_split("train", cfg.train_size, &mut rng_train)?,
        valid: draw_split("valid", cfg.valid_size, &mut rng_valid)?,
        test: draw_split("test", cfg.test_size, &mut rng_test)?,
    })
}

/// Positive count of every label over `samples`.
pub fn label_frequencies(samples: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut freq = vec![0usize; num_classes];
    for s in samples {
        for c in s.labels.positives() {
            freq[c] += 1;
        }
    }
    freq
}

/// Splits labels into `num_groups` groups of near-equal size by descending
/// training frequency (ties: lower label index first). Returns label -> group.
pub fn frequency_groups(train: &[Sample], num_classes: usize, num_groups: usize) -> Result<Vec<usize>> {
    if num_groups == 0 {
        return Err(DennError::invalid("num_groups must be >= 1"));
    }
    let freq = label_frequencies(train, num_classes);
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    let mut groups = vec![0usize; num_classes];
    for (rank, &c) in order.iter().enumerate() {
        groups[c] = rank * num_groups / num_classes;
    }
    Ok(groups)
}

/// Groups labels by explicit descending frequency boundaries: group 0 holds
/// `f > thresholds[0]`, group g holds `thresholds[g-1] >= f > thresholds[g]`
/// and the last group holds `f <= thresholds[last]`.
pub fn groups_from_thresholds(freq: &[usize], thresholds: &[usize]) -> Result<Vec<usize>> {
    if thresholds.windows(2).any(|w| w[0] <= w[1]) {
        return Err(DennError::invalid(
            "frequency thresholds must be strictly decreasing",
        ));
    }
    Ok(freq
        .iter()
        .map(|&f| thresholds.iter().filter(|&&t| f <= t).count())
        .collect())
}
