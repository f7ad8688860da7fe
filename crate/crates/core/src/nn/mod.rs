//! Reverse-mode differentiation over `(C, H, W)` tensors with the layers used
//! by the mapping networks, plus Adam, finite-difference gradient checking and
//! a versioned checkpoint format.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{pixel_unshuffle, Graph, Var};
pub use params::{kaiming_uniform, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite gradient produced by {op} backward (node {node})")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}
