use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::data::{AUDIO_DIM, TEXT_DIM};

/// Which streams feed the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    /// Both streams with cross-modal attention.
    #[default]
    Fused,
    Audio,
    Text,
}

impl ModelMode {
    pub const ALL: [ModelMode; 3] = [ModelMode::Fused, ModelMode::Audio, ModelMode::Text];

    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Fused => "fused",
            ModelMode::Audio => "audio",
            ModelMode::Text => "text",
        }
    }

    pub fn uses_audio(self) -> bool {
        self != ModelMode::Text
    }

    pub fn uses_text(self) -> bool {
        self != ModelMode::Audio
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ModelMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected fused, audio or text)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub lstm_hidden: usize,
    pub dropout: f64,
    /// Width of both streams entering attention; must be `2 * lstm_hidden`.
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Fused,
            audio_dim: AUDIO_DIM,
            text_dim: TEXT_DIM,
            conv_channels: 256,
            conv_kernel: 3,
            conv_stride: 2,
            conv_padding: 1,
            lstm_hidden: 128,
            dropout: 0.2,
            model_dim: 256,
            heads: 8,
            head_dim: 32,
            ffn_hidden: 256,
            residual: true,
        }
    }
}

impl ModelConfig {
    /// Small instance for gradient checks: every width 8, LSTM hidden 4,
    /// two heads of width 2, no dropout.
    pub fn tiny() -> Self {
        Self {
            audio_dim: 8,
            text_dim: 8,
            conv_channels: 8,
            lstm_hidden: 4,
            dropout: 0.0,
            model_dim: 8,
            heads: 2,
            head_dim: 2,
            ffn_hidden: 8,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: ModelMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        for (name, v) in [
            ("audio_dim", self.audio_dim),
            ("text_dim", self.text_dim),
            ("conv_channels", self.conv_channels),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("lstm_hidden", self.lstm_hidden),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.model_dim != 2 * self.lstm_hidden {
            return fail(format!(
                "model_dim {} must equal twice lstm_hidden {}",
                self.model_dim, self.lstm_hidden
            ));
        }
        Ok(())
    }

    /// Width of the vector the classifier sees.
    pub fn fused_dim(&self) -> usize {
        match self.mode {
            ModelMode::Fused => 4 * self.model_dim,
            _ => 2 * self.model_dim,
        }
    }
}
