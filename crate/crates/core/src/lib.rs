//! Synthetic-image detection posed as image captioning.
//!
//! Small vision-language captioners learn to caption an image as `real` or
//! `fake`, optionally through low-rank adapters, and are compared against
//! single-logit binary classifiers on a procedural multi-generator
//! benchmark.

pub mod autograd;
pub mod baselines;
pub mod caption;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tensor_io;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
