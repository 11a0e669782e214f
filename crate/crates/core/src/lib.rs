//! Two-stream audio/text emotion classification with bidirectional
//! cross-modal attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and tape-based reverse-mode differentiation
//! - [`layers`]: convolution, normalization, BiLSTM, linear and dropout layers
//! - [`model`]: the audio encoder, text projection, cross-modal attention
//!   blocks, statistics pooling and the fused classifier
//! - [`train`]: loss, Adam, plateau scheduling, metrics and the
//!   leave-one-session-out protocol
//! - [`data`]: the CMAF feature-file format, the synthetic task generator and
//!   batching

pub mod data;
pub mod layers;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use data::{Batch, EmotionLabel, FeatureSequence, Modality, UtteranceSample};
pub use model::{Checkpoint, Model, ModelConfig, ModelMode};
pub use train::{EvalReport, Metrics, TrainConfig};
pub use tensor::{GradTape, ParamStore, Scalar, Tensor, Var};
