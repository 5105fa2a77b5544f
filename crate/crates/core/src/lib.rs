//! Multi-label attribute recognition toolkit.
//!
//! Residual CNNs trained with a per-attribute weighted sigmoid cross-entropy,
//! per-attribute decision-threshold calibration, the usual multi-label
//! evaluation metrics, and GradCAM heatmaps, all on a small CPU tensor engine.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod kv;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod registry;
pub mod tape;
pub mod tensor;
pub mod train;

mod kernels;
mod linalg;

pub use error::{Error, Result};
pub use network::{Forward, HeadKind, Network, NetworkConfig};
pub use optim::{LrSchedule, SgdNesterov};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use matrix::{LabelMatrix, Matrix, ScoreMatrix};
