//! DENN: multi-label classification with a contrastively trained encoder,
//! a kNN datastore over training embeddings, and a per-sample debiased
//! confidence that mixes kNN and classifier predictions.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod datastore;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod loss;
pub mod math;
pub mod pipeline;
pub mod trainer;

pub use dataset::{Dataset, LabelVec, Sample};
pub use datastore::{Datastore, Neighbor};
pub use encoder::{EncoderDims, EncoderState};
pub use error::{DennError, Result};
pub use inference::{InferenceConfig, InferenceMode, PredictionBundle};
pub use loss::ContrastiveVariant;
pub use trainer::TrainConfig;
