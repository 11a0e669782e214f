use rand::Rng;

use super::{ModelConfig, Result};
use crate::layers::{BatchNorm, BatchStats, BiLstm, Conv1d, Dropout, LayerError, Mode, PackedSeq};
use crate::tensor::{GradTape, ParamStore, Scalar};

/// Two strided convolutions with batch norm and ReLU, then a BiLSTM.
/// Reduces the frame rate by four.
#[derive(Clone, Debug)]
pub struct AudioFeatureEncoder {
    pub conv1: Conv1d,
    pub bn1: BatchNorm,
    pub conv2: Conv1d,
    pub bn2: BatchNorm,
    pub lstm: BiLstm,
    pub dropout: Dropout,
}

pub const MIN_AUDIO_FRAMES: usize = 4;

impl AudioFeatureEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let (k, s, p) = (cfg.conv_kernel, cfg.conv_stride, cfg.conv_padding);
        let c = cfg.conv_channels;
        let conv1 = Conv1d::new(store, "audio.conv1", cfg.audio_dim, c, k, s, p, rng);
        let bn1 = BatchNorm::new(store, "audio.bn1", c);
        let conv2 = Conv1d::new(store, "audio.conv2", c, c, k, s, p, rng);
        let bn2 = BatchNorm::new(store, "audio.bn2", c);
        let lstm = BiLstm::new(store, "audio.lstm", c, cfg.lstm_hidden, rng);
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            lstm,
            dropout: Dropout::new(cfg.dropout),
        }
    }

    pub fn output_len(&self, frames: usize) -> Option<usize> {
        if frames < MIN_AUDIO_FRAMES {
            return None;
        }
        self.conv1.output_len(frames).and_then(|n| self.conv2.output_len(n))
    }

    /// Returns the encoded sequences and the batch statistics of both norm
    /// layers (train mode only).
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape<'_, T>,
        x: &PackedSeq,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(PackedSeq, Vec<BatchStats>)> {
        if let Some(&len) = x.lengths.iter().find(|&&n| n < MIN_AUDIO_FRAMES) {
            return Err(LayerError::InputTooShort {
                layer: "audio encoder",
                len,
                needed: MIN_AUDIO_FRAMES,
            }
            .into());
        }
        let mut stats = Vec::new();
        let mut h = x.clone();
        for (conv, bn) in [(&self.conv1, &self.bn1), (&self.conv2, &self.bn2)] {
            h = conv.forward(tape, &h)?;
            let (y, s) = bn.forward(tape, h.data, mode)?;
            stats.extend(s);
            h = h.with_data(tape.relu(y)?);
        }
        let h = self.lstm.forward(tape, &h)?;
        let out = self.dropout.forward(tape, h.data, mode, rng)?;
        Ok((h.with_data(out), stats))
    }

    pub fn batch_norms_mut(&mut self) -> [&mut BatchNorm; 2] {
        [&mut self.bn1, &mut self.bn2]
    }

    pub fn batch_norms(&self) -> [&BatchNorm; 2] {
        [&self.bn1, &self.bn2]
    }
}

/// Frame-wise projection of token vectors, a width-1 convolution.
#[derive(Clone, Debug)]
pub struct TextProjection {
    pub proj: Conv1d,
}

impl TextProjection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Conv1d::new(store, "text.proj", cfg.text_dim, cfg.model_dim, 1, 1, 0, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut GradTape<'_, T>, x: &PackedSeq) -> Result<PackedSeq> {
        Ok(self.proj.forward(tape, x)?)
    }
}
