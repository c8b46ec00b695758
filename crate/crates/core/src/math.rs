//! Shared numerics: cosine similarity, temperature softmax, sigmoid and the
//! seeded random number generator used everywhere randomness is needed.
//!
//! All arithmetic is carried out in `f64`.
//!
//! # Random numbers
//!
//! Every random draw in the crate comes from [`DennRng`], which is ChaCha8
//! (the ChaCha stream cipher reduced to 8 rounds, as provided by
//! `rand_chacha`). Its output is fully specified by the 64-bit seed and the
//! 64-bit stream number, independent of platform and endianness. Callers that
//! need independent reproducible sub-streams (one per training iteration, one
//! per epoch shuffle, ...) derive them with [`stream_rng`] instead of sharing
//! a single mutable generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DennError, Result};

pub type DennRng = ChaCha8Rng;

/// Generator for `seed`, stream 0.
pub fn seeded_rng(seed: u64) -> DennRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `seed` positioned at the start of `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> DennRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Zero-norm inputs are rejected instead of silently mapping to 0.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DennError::dims(format!(
            "cosine_sim: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(DennError::invalid("cosine_sim: zero-norm vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `softmax(scores / tau)` with max-subtraction.
pub fn softmax_temp(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(DennError::invalid(format!(
            "softmax temperature must be > 0, got {tau}"
        )));
    }
    if scores.is_empty() {
        return Err(DennError::invalid("softmax over an empty score list"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DennError::invalid("softmax over non-finite scores"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    Ok(out)
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.707_106_781_186_547_6).abs() < 1e-9);
    }

    #[test]
    fn cosine_rejects_zero_norm_and_length_mismatch() {
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(DennError::InvalidInput(_))
        ));
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(DennError::Dimension(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.3, 0.3, 0.3], 0.7).unwrap();
        for w in &p {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(2) / (exp(2) + 1)
        let p = softmax_temp(&[0.1, 0.0], 0.05).unwrap();
        assert!((p[0] - 0.880_797_077_977_882_3).abs() < 1e-8);
        assert!((p[1] - 0.119_202_922_022_117_6).abs() < 1e-8);
        assert_eq!(softmax_temp(&[-4.2], 0.05).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -1.0).is_err());
        assert!(softmax_temp(&[], 1.0).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        let big = sigmoid(700.0);
        assert!(big.is_finite() && big <= 1.0 && big > 0.999_999);
        let small = sigmoid(-700.0);
        assert!(small.is_finite() && small >= 0.0);
        assert!(sigmoid(20.0) > 0.999);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..8).map(|_| stream_rng(7, 3).random()).collect();
        let mut r = stream_rng(7, 3);
        let b: Vec<u64> = (0..8).map(|_| r.random()).collect();
        assert_eq!(a[0], b[0]);
        let mut r1 = seeded_rng(11);
        let mut r2 = seeded_rng(11);
        for _ in 0..100 {
            assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        }
        let mut s4 = stream_rng(7, 4);
        assert_ne!(b[0], s4.random::<u64>());
    }

    proptest! {
        #[test]
        fn sigmoid_symmetry(x in -700.0f64..700.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
            let s = sigmoid(x);
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn softmax_shift_invariant(
            scores in proptest::collection::vec(-1.0f64..1.0, 1..20),
            shift in -50.0f64..50.0,
            tau in 0.01f64..2.0,
        ) {
            let p = softmax_temp(&scores, tau).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = softmax_temp(&shifted, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!(*a >= 0.0);
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 1..16),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(l2_norm(&a) > 1e-6);
            let b: Vec<f64> = a.iter().rev().copied().collect();
            prop_assume!(l2_norm(&b) > 1e-6);
            prop_assert_eq!(cosine_sim(&a, &b).unwrap(), cosine_sim(&b, &a).unwrap());
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            prop_assert!((cosine_sim(&a, &scaled).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
