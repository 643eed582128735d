//! Two-headed deep clustering / mask-inference separation.
//!
//! A shared BLSTM body emits a per-frame F×D representation. One head turns
//! it into unit-norm embeddings clustered with K-means at test time, the other
//! into per-frequency softmax masks. Both are trained jointly on a weighted
//! sum of the deep clustering and spectrum approximation objectives.

pub mod cluster;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod loss;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod wav;

pub use error::{Error, Result};
