//! State-state siamese embeddings for anomaly detection in game frame
//! sequences.
//!
//! A convolutional network is trained with a batch-all triplet loss so that
//! consecutive frames of normal play land close together. The squared
//! distance between consecutive embeddings then serves as the anomaly score
//! of a transition.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod game;
pub mod inject;
pub mod model;
pub mod triplet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
