//! Dense-tensor reverse-mode differentiation.
//!
//! Operations are recorded on a [`Graph`] tape and differentiated by
//! [`Graph::backward`]. Values are `f64` throughout; leaves can share
//! parameter storage through `Arc<Tensor>` so a frozen model can be
//! evaluated from many threads, each with its own graph.

mod attention;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

use thiserror::Error;

pub use attention::{attention_block, AttentionOutput, BlockVars};
pub use gradcheck::{grad_check, graph_probe, GradCheckReport, Probe, MIXED_FLOOR};
pub use graph::{Fnv, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
