use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EmotionLabel, UtteranceSample};

/// Right-padded mini-batch. Blocks are `[size x frames x dim]` row-major;
/// padded entries are zero and masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub audio: Vec<f32>,
    pub audio_frames: usize,
    pub audio_dim: usize,
    pub audio_mask: Vec<bool>,
    pub text: Vec<f32>,
    pub text_frames: usize,
    pub text_dim: usize,
    pub text_mask: Vec<bool>,
    pub labels: Vec<EmotionLabel>,
    pub ids: Vec<String>,
}

fn pad<'a>(
    seqs: impl Iterator<Item = (usize, &'a [f32])> + Clone,
    dim: usize,
) -> (Vec<f32>, usize, Vec<bool>) {
    let max = seqs.clone().map(|(n, _)| n).max().unwrap_or(0);
    let count = seqs.clone().count();
    let mut block = vec![0.0f32; count * max * dim];
    let mut mask = vec![false; count * max];
    for (b, (n, data)) in seqs.enumerate() {
        block[b * max * dim..b * max * dim + n * dim].copy_from_slice(data);
        mask[b * max..b * max + n].iter_mut().for_each(|m| *m = true);
    }
    (block, max, mask)
}

/// Valid-prefix lengths from a `[rows x frames]` mask. Masks must mark a
/// contiguous prefix of each row.
pub(crate) fn prefix_lengths(mask: &[bool], frames: usize) -> Result<Vec<usize>, String> {
    if frames == 0 {
        return Err("batch has no frames".into());
    }
    mask.chunks(frames)
        .enumerate()
        .map(|(b, row)| {
            let n = row.iter().take_while(|&&m| m).count();
            if row[n..].iter().any(|&m| m) {
                Err(format!("mask of row {b} is not a contiguous prefix"))
            } else if n == 0 {
                Err(format!("row {b} has no valid frames"))
            } else {
                Ok(n)
            }
        })
        .collect()
}

impl Batch {
    /// Pads the given samples. Panics on an empty slice or on mixed
    /// feature dims.
    pub fn from_samples(samples: &[&UtteranceSample]) -> Self {
        assert!(!samples.is_empty(), "empty batch");
        let audio_dim = samples[0].audio.dim;
        let text_dim = samples[0].text.dim;
        assert!(
            samples.iter().all(|s| s.audio.dim == audio_dim && s.text.dim == text_dim),
            "mixed feature dims in one batch"
        );
        let (audio, audio_frames, audio_mask) = pad(
            samples.iter().map(|s| (s.audio.frames, s.audio.data.as_slice())),
            audio_dim,
        );
        let (text, text_frames, text_mask) = pad(
            samples.iter().map(|s| (s.text.frames, s.text.data.as_slice())),
            text_dim,
        );
        Self {
            size: samples.len(),
            audio,
            audio_frames,
            audio_dim,
            audio_mask,
            text,
            text_frames,
            text_dim,
            text_mask,
            labels: samples.iter().map(|s| s.label).collect(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        }
    }

    pub fn single(sample: &UtteranceSample) -> Self {
        Self::from_samples(&[sample])
    }

    pub fn audio_lengths(&self) -> Result<Vec<usize>, String> {
        prefix_lengths(&self.audio_mask, self.audio_frames)
    }

    pub fn text_lengths(&self) -> Result<Vec<usize>, String> {
        prefix_lengths(&self.text_mask, self.text_frames)
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

/// Index groups for mini-batches over `n` samples: seeded shuffle when a
/// seed is given, original order otherwise. The last partial batch is kept.
pub fn batch_order(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub fn make_batches(
    samples: &[UtteranceSample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    batch_order(samples.len(), batch_size, shuffle_seed)
        .into_iter()
        .map(|group| {
            let refs: Vec<&UtteranceSample> = group.iter().map(|&i| &samples[i]).collect();
            Batch::from_samples(&refs)
        })
        .collect()
}
