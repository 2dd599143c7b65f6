//! Token-selective backpropagation for transformer fine-tuning.
//!
//! Gradients flow through a chosen subset of `k` input positions only; the
//! remaining positions are computed as constants, so only the selected
//! rows leave activations in the backward cache.

pub mod adapters;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod matrix;
pub mod memprofile;
pub mod parallel;
pub mod tokentune;
pub mod train;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::{Dtype, Matrix};
