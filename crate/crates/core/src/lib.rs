//! Joint learn-and-adapt training for cross-domain person re-identification.
//!
//! A shared convolutional extractor feeds an identity classifier and one
//! classifier per semantic attribute. Training on a labelled source domain
//! is regularized by aligning, under the maximum mean discrepancy, both the
//! attribute logits and the pooled mid-level features of source and
//! unlabelled target batches.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod kernel;
pub mod loss;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
