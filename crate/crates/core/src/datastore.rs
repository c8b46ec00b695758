//! Key-value store of training embeddings and their label vectors, with
//! exact top-k cosine retrieval and a compact binary file format.
//!
//! # File format
//!
//! All integers little-endian.
//!
//! | offset | size          | field                                   |
//! |--------|---------------|-----------------------------------------|
//! | 0      | 8             | magic `b"DENNSTOR"`                     |
//! | 8      | 4             | format version (`u32`, currently 1)     |
//! | 12     | 4             | embedding dimension `d` (`u32`)         |
//! | 16     | 4             | number of classes `C` (`u32`)           |
//! | 20     | 8             | entry count `n` (`u64`)                 |
//! | 28     | `4 * d * n`   | keys, row-major `f32`                   |
//! | ...    | `ceil(C/8)*n` | labels, one packed bitset per entry     |
//!
//! In a label bitset, class `c` is bit `c % 8` (least significant first) of
//! byte `c / 8`; padding bits are zero. The file size is exactly
//! `28 + n * (4d + ceil(C/8))` bytes.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use crate::dataset::{LabelVec, Sample};
use crate::encoder::EncoderState;
use crate::error::{DennError, Result};
use crate::math::l2_norm;

pub const MAGIC: &[u8; 8] = b"DENNSTOR";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

/// Keys are held as `f32` (the on-disk precision); similarity arithmetic is
/// done in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    num_classes: usize,
    keys: Vec<f32>,
    norms: Vec<f64>,
    values: Vec<LabelVec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
    pub labels: LabelVec,
}

impl Datastore {
    /// Builds a store from explicit keys and values.
    pub fn from_entries(dim: usize, num_classes: usize, entries: Vec<(Vec<f64>, LabelVec)>) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(DennError::invalid("datastore dims must be >= 1"));
        }
        let mut keys = Vec::with_capacity(entries.len() * dim);
        let mut values = Vec::with_capacity(entries.len());
        for (i, (k, v)) in entries.into_iter().enumerate() {
            if k.len() != dim || v.len() != num_classes {
                return Err(DennError::dims(format!(
                    "entry {i}: key length {} / label width {} vs ({dim}, {num_classes})",
                    k.len(),
                    v.len()
                )));
            }
            keys.extend(k.iter().map(|&x| x as f32));
            values.push(v);
        }
        Self::from_parts(dim, num_classes, keys, values)
    }

    fn from_parts(dim: usize, num_classes: usize, keys: Vec<f32>, values: Vec<LabelVec>) -> Result<Self> {
        let norms: Vec<f64> = keys
            .chunks_exact(dim)
            .map(|k| {
                let k64: Vec<f64> = k.iter().map(|&x| x as f64).collect();
                l2_norm(&k64)
            })
            .collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(DennError::invalid(format!("datastore key {i} has zero or non-finite norm")));
        }
        Ok(Datastore {
            dim,
            num_classes,
            keys,
            norms,
            values,
        })
    }

    /// One entry per sample, in input order, from dropout-off embeddings.
    pub fn build(state: &EncoderState, train: &[Sample]) -> Result<Self> {
        if train.is_empty() {
            return Err(DennError::invalid("cannot build a datastore from an empty training set"));
        }
        let entries = train
            .iter()
            .map(|s| {
                if s.labels.len() != state.dims.num_classes {
                    return Err(DennError::dims("sample label width differs from the model"));
                }
                Ok((state.embed(s)?, s.labels.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(state.dims.embed_dim, state.dims.num_classes, entries)
    }

    /// Store over the first `ceil(fraction * n)` training samples (at least one).
    pub fn build_fraction(state: &EncoderState, train: &[Sample], fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(DennError::invalid(format!("store fraction must lie in (0, 1], got {fraction}")));
        }
        let take = ((fraction * train.len() as f64).ceil() as usize).clamp(1, train.len().max(1));
        Self::build(state, &train[..take.min(train.len())])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> &LabelVec {
        &self.values[i]
    }

    /// Cosine similarity between `query` and every key, in store order.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(DennError::dims(format!(
                "query has {} dims, store has {}",
                query.len(),
                self.dim
            )));
        }
        let qn = l2_norm(query);
        if qn == 0.0 || !qn.is_finite() {
            return Err(DennError::invalid("zero-norm query"));
        }
        Ok(self
            .keys
            .chunks_exact(self.dim)
            .zip(&self.norms)
            .map(|(k, &kn)| {
                let dot: f64 = k.iter().zip(query).map(|(&a, &b)| a as f64 * b).sum();
                // `+ 0.0` maps -0.0 to 0.0 so orthogonal keys tie under total_cmp.
                (dot / (qn * kn)).clamp(-1.0, 1.0) + 0.0
            })
            .collect())
    }

    /// The `min(k, len)` most similar entries, by descending similarity and
    /// then ascending index.
    pub fn retrieve_topk(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(DennError::invalid("k must be >= 1"));
        }
        let sims = self.similarities(query)?;
        let mut idx: Vec<usize> = (0..sims.len()).collect();
        let order = |a: &usize, b: &usize| -> Ordering { sims[*b].total_cmp(&sims[*a]).then(a.cmp(b)) };
        let k = k.min(idx.len());
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_unstable_by(order);
        Ok(idx
            .into_iter()
            .map(|i| Neighbor {
                index: i,
                similarity: sims[i],
                labels: self.values[i].clone(),
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let label_bytes = self.num_classes.div_ceil(8);
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (4 * self.dim + label_bytes));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for k in &self.keys {
            out.extend_from_slice(&k.to_le_bytes());
        }
        for v in &self.values {
            let mut packed = vec![0u8; label_bytes];
            for c in v.positives() {
                packed[c / 8] |= 1 << (c % 8);
            }
            out.extend_from_slice(&packed);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| DennError::Format(format!("datastore: {m}"));
        if bytes.len() < HEADER_LEN {
            return Err(fmt(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[0..8] != MAGIC {
            return Err(fmt("bad magic bytes".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let dim = u32_at(12) as usize;
        let num_classes = u32_at(16) as usize;
        let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
        if dim == 0 || num_classes == 0 {
            return Err(fmt("zero dimension in header".into()));
        }
        let label_bytes = num_classes.div_ceil(8);
        let expected = usize::try_from(count)
            .ok()
            .and_then(|n| n.checked_mul(4 * dim + label_bytes))
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| fmt("entry count overflows".into()))?;
        if bytes.len() != expected {
            return Err(fmt(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let count = count as usize;
        let key_end = HEADER_LEN + 4 * dim * count;
        let keys: Vec<f32> = bytes[HEADER_LEN..key_end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let mut values = Vec::with_capacity(count);
        for packed in bytes[key_end..].chunks_exact(label_bytes) {
            let mut v = LabelVec::zeros(num_classes);
            for c in 0..num_classes {
                v.set(c, packed[c / 8] >> (c % 8) & 1 == 1);
            }
            let padding = label_bytes * 8 - num_classes;
            if padding > 0 && packed[label_bytes - 1] >> (8 - padding) != 0 {
                return Err(fmt("nonzero padding bits in a label bitset".into()));
            }
            values.push(v);
        }
        Self::from_parts(dim, num_classes, keys, values).map_err(|e| fmt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| DennError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DennError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(c: usize, pos: &[usize]) -> LabelVec {
        LabelVec::from_indices(c, pos).unwrap()
    }

    fn store() -> Datastore {
        Datastore::from_entries(
            2,
            3,
            vec![
                (vec![1.0, 0.0], lv(3, &[0])),
                (vec![0.0, 1.0], lv(3, &[1])),
                (vec![1.0, 1.0], lv(3, &[0, 2])),
                (vec![-1.0, 0.0], lv(3, &[2])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_keys_tie_by_index() {
        // [-1, 0] . [0, 1] sums to -0.0; it must tie with the +0.0 entries.
        let s = Datastore::from_entries(
            2,
            1,
            vec![
                (vec![1.0, 0.0], lv(1, &[0])),
                (vec![-1.0, 0.0], lv(1, &[0])),
                (vec![0.0, 1.0], lv(1, &[0])),
            ],
        )
        .unwrap();
        let got: Vec<usize> = s.retrieve_topk(&[0.0, 1.0], 3).unwrap().iter().map(|n| n.index).collect();
        assert_eq!(got, vec![2, 0, 1]);
        let sims = s.similarities(&[0.0, 1.0]).unwrap();
        assert!(sims[0].is_sign_positive() && sims[1].is_sign_positive());
    }

    #[test]
    fn k_larger_than_store_returns_everything_sorted() {
        let s = store();
        let hits = s.retrieve_topk(&[1.0, 0.2], 10).unwrap();
        assert_eq!(hits.len(), 4);
        let idx: Vec<usize> = hits.iter().map(|h| h.index).collect();
        assert_eq!(idx, vec![0, 2, 1, 3]);
        assert!(hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn query_equal_to_a_key_comes_first() {
        let s = store();
        let hits = s.retrieve_topk(&[1.0, 1.0], 2).unwrap();
        assert_eq!(hits[0].index, 2);
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(hits[0].labels, lv(3, &[0, 2]));
    }

    #[test]
    fn ties_break_by_index() {
        let s = Datastore::from_entries(
            1,
            1,
            (0..5).map(|_| (vec![2.0], lv(1, &[0]))).collect(),
        )
        .unwrap();
        let hits = s.retrieve_topk(&[3.0], 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn rejects_bad_queries() {
        let s = store();
        assert!(s.retrieve_topk(&[0.0, 0.0], 1).is_err());
        assert!(s.retrieve_topk(&[1.0], 1).is_err());
        assert!(s.retrieve_topk(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn byte_layout() {
        let s = store();
        let b = s.to_bytes();
        assert_eq!(&b[..8], b"DENNSTOR");
        assert_eq!(b.len(), HEADER_LEN + 4 * (4 * 2 + 1));
        // Last entry has only class 2 set.
        assert_eq!(*b.last().unwrap(), 0b100);
        assert_eq!(Datastore::from_bytes(&b).unwrap(), s);
    }

    #[test]
    fn corrupt_and_truncated_files_are_rejected() {
        let b = store().to_bytes();
        let mut bad = b.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Datastore::from_bytes(&bad), Err(DennError::Format(_))));
        let mut bad = b.clone();
        bad[8] = 9;
        assert!(Datastore::from_bytes(&bad).is_err());
        assert!(Datastore::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Datastore::from_bytes(&b[..10]).is_err());
        let mut bad = b.clone();
        *bad.last_mut().unwrap() |= 0x80;
        assert!(Datastore::from_bytes(&bad).is_err());
    }

    #[test]
    fn zero_keys_are_rejected() {
        assert!(Datastore::from_entries(2, 1, vec![(vec![0.0, 0.0], lv(1, &[0]))]).is_err());
    }
}
