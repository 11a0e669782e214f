//! A synthetic task that can only be solved by combining both modalities.
//!
//! Each class is a pair of bits, `label = 2 * audio_bit + text_bit`. The audio
//! stream carries `audio_bit` and nothing else; the text stream carries
//! `text_bit` and nothing else. Each stream hides its bit in one of four
//! motifs: motif `2 * bit + nuisance`, where the nuisance bit is drawn
//! uniformly at random, so a motif identifies its bit but never the other
//! modality's. A single modality therefore caps accuracy at one half on
//! balanced data, while the pair determines the label.
//!
//! Motif `k` occupies its own slice of a reserved channel band (channels
//! `k * w .. (k + 1) * w` with `w = band / 4`) as a fixed random sign pattern
//! of height `amplitude`, held for a fixed number of consecutive frames at a
//! uniformly random offset. Every channel of every frame also receives
//! independent Gaussian noise of standard deviation `noise`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EmotionLabel, FeatureSequence, Modality, UtteranceSample, AUDIO_DIM, TEXT_DIM};
use crate::seed::derive_seed;

pub const SESSIONS: u8 = 5;
pub const MOTIFS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub samples: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Inclusive range of audio frame counts.
    pub audio_frames: [usize; 2],
    /// Inclusive range of text token counts.
    pub text_frames: [usize; 2],
    /// Channels reserved for audio motifs, split evenly across the four motifs.
    pub audio_band: usize,
    pub text_band: usize,
    pub audio_motif_frames: usize,
    pub text_motif_frames: usize,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 100,
            noise: 0.2,
            audio_frames: [40, 120],
            text_frames: [5, 20],
            audio_band: 64,
            text_band: 64,
            audio_motif_frames: 8,
            text_motif_frames: 2,
            amplitude: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let fail = |m: String| Err(SyntheticError::InvalidSpec(m));
        if self.samples == 0 {
            return fail("samples must be positive".into());
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return fail(format!("noise must be a non-negative number, got {}", self.noise));
        }
        if !self.amplitude.is_finite() || self.amplitude <= 0.0 {
            return fail(format!("amplitude must be positive, got {}", self.amplitude));
        }
        for (name, range, motif, band, dim, min_frames) in [
            ("audio", self.audio_frames, self.audio_motif_frames, self.audio_band, AUDIO_DIM, 4),
            ("text", self.text_frames, self.text_motif_frames, self.text_band, TEXT_DIM, 1),
        ] {
            if range[0] > range[1] {
                return fail(format!("{name} frame range {range:?} is empty"));
            }
            if range[0] < min_frames {
                return fail(format!("{name} sequences need at least {min_frames} frames"));
            }
            if motif == 0 || motif > range[0] {
                return fail(format!(
                    "{name} motif length {motif} must be in 1..={}",
                    range[0]
                ));
            }
            if band == 0 || band % MOTIFS != 0 || band > dim {
                return fail(format!(
                    "{name} band {band} must be a positive multiple of {MOTIFS} no larger than {dim}"
                ));
            }
        }
        Ok(())
    }

    pub fn audio_bit(label: EmotionLabel) -> usize {
        label.index() >> 1
    }

    pub fn text_bit(label: EmotionLabel) -> usize {
        label.index() & 1
    }
}

/// The fixed motif patterns of one spec.
#[derive(Clone, Debug)]
pub struct MotifBank {
    pub audio: Vec<Vec<f32>>,
    pub text: Vec<Vec<f32>>,
}

impl MotifBank {
    pub fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "motif-bank"));
        let amp = spec.amplitude as f32;
        let mut bank = |band: usize| -> Vec<Vec<f32>> {
            (0..MOTIFS)
                .map(|_| {
                    (0..band / MOTIFS)
                        .map(|_| if rng.random::<bool>() { amp } else { -amp })
                        .collect()
                })
                .collect()
        };
        let audio = bank(spec.audio_band);
        let text = bank(spec.text_band);
        Self { audio, text }
    }

    /// First channel of motif `k`'s slice.
    pub fn channel_offset(k: usize, band: usize) -> usize {
        k * (band / MOTIFS)
    }
}

fn sequence(
    rng: &mut ChaCha8Rng,
    noise: Option<&Normal<f32>>,
    modality: Modality,
    frames: usize,
    dim: usize,
) -> FeatureSequence {
    let data = match noise {
        Some(n) => (0..frames * dim).map(|_| n.sample(rng)).collect(),
        None => vec![0.0; frames * dim],
    };
    FeatureSequence::new(modality, frames, dim, data)
}

fn inject(seq: &mut FeatureSequence, pattern: &[f32], channel: usize, start: usize, len: usize) {
    for t in start..start + len {
        let frame = seq.frame_mut(t);
        for (c, &p) in pattern.iter().enumerate() {
            frame[channel + c] += p;
        }
    }
}

/// Generates `spec.samples` utterances. Labels cycle through the four
/// classes and sessions through `1..=5`, so classes are balanced within one
/// sample overall and within each session.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<UtteranceSample>, SyntheticError> {
    spec.validate()?;
    let bank = MotifBank::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "samples"));
    let normal = (spec.noise > 0.0)
        .then(|| Normal::new(0.0f32, spec.noise as f32).expect("validated noise"));
    let mut out = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let label = EmotionLabel::from_index(i % MOTIFS).expect("four classes");
        let session = (i % SESSIONS as usize) as u8 + 1;
        let n_audio = rng.random_range(spec.audio_frames[0]..=spec.audio_frames[1]);
        let n_text = rng.random_range(spec.text_frames[0]..=spec.text_frames[1]);
        let audio_motif = 2 * SyntheticSpec::audio_bit(label) + rng.random_range(0..2);
        let text_motif = 2 * SyntheticSpec::text_bit(label) + rng.random_range(0..2);
        let audio_start = rng.random_range(0..=n_audio - spec.audio_motif_frames);
        let text_start = rng.random_range(0..=n_text - spec.text_motif_frames);

        let mut audio = sequence(&mut rng, normal.as_ref(), Modality::Audio, n_audio, AUDIO_DIM);
        let mut text = sequence(&mut rng, normal.as_ref(), Modality::Text, n_text, TEXT_DIM);
        inject(
            &mut audio,
            &bank.audio[audio_motif],
            MotifBank::channel_offset(audio_motif, spec.audio_band),
            audio_start,
            spec.audio_motif_frames,
        );
        inject(
            &mut text,
            &bank.text[text_motif],
            MotifBank::channel_offset(text_motif, spec.text_band),
            text_start,
            spec.text_motif_frames,
        );
        out.push(UtteranceSample {
            id: format!("syn-{i:05}"),
            session,
            audio,
            text,
            label,
        });
    }
    Ok(out)
}
