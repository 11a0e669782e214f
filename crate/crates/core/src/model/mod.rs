//! The two-stream network: audio feature encoder and text projection, two
//! cross-modal attention blocks, statistics pooling and the classifier.

mod attention;
mod checkpoint;
mod config;
mod encoder;
mod network;
mod pooling;

pub use attention::{AttentionOutput, CrossModalAttention};
pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor};
pub use config::{ModelConfig, ModelMode};
pub use encoder::{AudioFeatureEncoder, TextProjection};
pub use network::{param_group, ForwardOutput, Model, PARAM_GROUPS};
pub use pooling::{stats_pool, stats_pool_masked, stats_pool_packed, POOL_EPS};

use thiserror::Error;

use crate::layers::LayerError;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Layer(LayerError::Tensor(e))
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
