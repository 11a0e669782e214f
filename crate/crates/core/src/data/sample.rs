use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Frame dimension of the pretrained audio encoder's hidden states.
pub const AUDIO_DIM: usize = 1024;
/// Token dimension of the pretrained text encoder's hidden states.
pub const TEXT_DIM: usize = 768;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Angry = 0,
    Happy = 1,
    Neutral = 2,
    Sad = 3,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 4] = [Self::Angry, Self::Happy, Self::Neutral, Self::Sad];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Angry => "angry",
            Self::Happy => "happy",
            Self::Neutral => "neutral",
            Self::Sad => "sad",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown emotion label {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

/// A time-major `frames x dim` feature matrix. Every frame is valid; padding
/// only exists inside a [`Batch`](super::Batch).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, frames: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(frames * dim, data.len(), "feature sequence size mismatch");
        Self {
            modality,
            frames,
            dim,
            data,
        }
    }

    pub fn zeros(modality: Modality, frames: usize, dim: usize) -> Self {
        Self::new(modality, frames, dim, vec![0.0; frames * dim])
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// One labeled utterance with both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceSample {
    pub id: String,
    /// Recording session, `1..=5`.
    pub session: u8,
    pub audio: FeatureSequence,
    pub text: FeatureSequence,
    pub label: EmotionLabel,
}
