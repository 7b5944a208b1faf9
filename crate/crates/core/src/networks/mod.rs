//! The noise-conditioned score predictor.
//!
//! `score = head([prompt_0(c_0) ‖ … ‖ prompt_k(c_k) ‖ noise(X)])`, with one
//! independently parameterized prompt encoder per text-encoder stream.
//! Zeroing the noise branch yields a per-prompt prior estimate.

mod config;
mod model;

use thiserror::Error;

use crate::autograd::AutogradError;

pub use config::{
    account_layers, count_params_flops, Accounting, EncoderVariant, LayerCount, LayerSpec,
    NamedLayer, PredictorConfig, StreamDims,
};
pub use model::{Bound, NoiseTensor, PainePredictor, ParamId, ParamSet, PromptEmbedding};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl From<AutogradError> for NetworkError {
    fn from(e: AutogradError) -> Self {
        match e {
            AutogradError::Config(m) => NetworkError::Config(m),
            AutogradError::Numeric(m) => NetworkError::Numeric(m),
            AutogradError::Dimension(m) | AutogradError::Usage(m) => NetworkError::Dimension(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, NetworkError>;
