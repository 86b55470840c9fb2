//! Deterministic f64 tensor substrate: dense tensors, a reverse-mode
//! autodiff tape, a pinned PRNG, and a finite-difference gradient checker.

pub mod conv;
pub mod gemm;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, relative_error, GradCheckReport};
pub use rng::Rng;
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}
