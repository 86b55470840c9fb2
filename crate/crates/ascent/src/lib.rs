//! Concept-aligned vision transformer with multi-scale deformable fusion.
//!
//! A small ViT backbone is augmented with a convolutional feature pyramid,
//! fused into the patch tokens through multi-scale deformable attention, and
//! read out by a concept-attention head whose attention matrices double as
//! the model's explanations. Everything runs on a deterministic f64 autodiff
//! substrate built in [`numerics`]; there is no GPU path and no external
//! tensor framework.

pub mod backbone;
pub mod mse;
pub mod numerics;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}
