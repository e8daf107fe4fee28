//! Reverse-mode automatic differentiation over dense, row-major `f32` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar sweeps the recorded graph once in reverse and
//! yields [`Gradients`] for every trainable leaf reachable from it. All kernels
//! are single-threaded and deterministic: the same inputs always produce the
//! same bits.

mod kernels;
mod tape;
mod tensor;

pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
