//! Utterance samples, the CMAF feature-file format, the synthetic task
//! generator and padded batching.

mod batch;
pub mod cmaf;
mod sample;
pub mod synthetic;

pub use batch::{batch_order, make_batches, Batch};
pub use cmaf::{read_feature_file, write_feature_file, CmafError};
pub use sample::{EmotionLabel, FeatureSequence, Modality, UtteranceSample, AUDIO_DIM, TEXT_DIM};
pub use synthetic::{generate_synthetic, MotifBank, SyntheticError, SyntheticSpec};
