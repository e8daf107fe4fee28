//! Data-free quantization of image classifiers with a content/style-decoupled
//! generator and a style-intervention consistency penalty.
//!
//! The pipeline: pre-train a float teacher ([`model_zoo`]), wrap a low-bit copy
//! ([`quantization`]), then fine-tune it on synthesized images ([`generator`],
//! [`distillation`], [`causal_objective`], [`training`]) without touching the
//! training data. [`analysis`] holds CKA and the lambda sweep.

pub mod analysis;
pub mod causal_objective;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distillation;
mod error;
pub mod generator;
pub mod model_zoo;
pub mod optim;
pub mod params;
pub mod quantization;
pub mod training;

pub use dfq_autograd::{Tape, Tensor, Var};
pub use error::{Error, Result};
