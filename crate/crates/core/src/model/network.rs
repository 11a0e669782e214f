use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionOutput, CrossModalAttention};
use super::encoder::{AudioFeatureEncoder, TextProjection};
use super::pooling::stats_pool_packed;
use super::{ModelConfig, ModelError, ModelMode, Result};
use crate::data::{Batch, EmotionLabel};
use crate::layers::{BatchNorm, BatchStats, Linear, Mode, PackedSeq};
use crate::seed::rng_for;
use crate::tensor::{GradTape, ParamId, ParamStore, Scalar, Tensor, Var};

/// Gradient-check groups, in report order.
pub const PARAM_GROUPS: [&str; 9] = [
    "conv",
    "bilstm",
    "norms",
    "cma_query",
    "cma_key",
    "cma_value",
    "cma_out",
    "cma_ffn",
    "classifier",
];

pub fn param_group(name: &str) -> &'static str {
    let mut parts = name.split('.');
    let (top, layer) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    if layer.starts_with("bn") || layer.starts_with("ln_") {
        return "norms";
    }
    match (top, layer) {
        ("audio", "lstm") => "bilstm",
        ("audio", _) | ("text", _) => "conv",
        ("cma1" | "cma2", "query") => "cma_query",
        ("cma1" | "cma2", "key") => "cma_key",
        ("cma1" | "cma2", "value") => "cma_value",
        ("cma1" | "cma2", "out") => "cma_out",
        ("cma1" | "cma2", _) => "cma_ffn",
        _ => "classifier",
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B x 4]`
    pub logits: Var,
    /// Classifier input, `[B x fused_dim]`.
    pub fused: Var,
    pub audio: Option<PackedSeq>,
    pub text: Option<PackedSeq>,
    pub cma1: Option<AttentionOutput>,
    pub cma2: Option<AttentionOutput>,
    /// Batch statistics of `audio.bn1` and `audio.bn2` in train mode.
    pub bn_stats: Vec<BatchStats>,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub audio: Option<AudioFeatureEncoder>,
    pub text: Option<TextProjection>,
    pub cma1: Option<CrossModalAttention>,
    pub cma2: Option<CrossModalAttention>,
    pub classifier: Linear,
}

fn pack<T: Scalar>(
    tape: &mut GradTape<'_, T>,
    block: &[f32],
    frames: usize,
    dim: usize,
    lengths: Vec<usize>,
) -> Result<PackedSeq> {
    let total: usize = lengths.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    for (b, &n) in lengths.iter().enumerate() {
        let start = b * frames * dim;
        data.extend(block[start..start + n * dim].iter().map(|&v| T::from_f64(v as f64)));
    }
    let x = tape.constant(Tensor::new(vec![total, dim], data)?);
    Ok(PackedSeq::new(x, lengths))
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; all initial weights derive from
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "init");
        let mut params = ParamStore::new();
        let mode = config.mode;
        let audio = mode
            .uses_audio()
            .then(|| AudioFeatureEncoder::new(&mut params, &config, &mut rng));
        let text = mode
            .uses_text()
            .then(|| TextProjection::new(&mut params, &config, &mut rng));
        let (cma1, cma2) = if mode == ModelMode::Fused {
            (
                Some(CrossModalAttention::new(&mut params, "cma1", &config, &mut rng)),
                Some(CrossModalAttention::new(&mut params, "cma2", &config, &mut rng)),
            )
        } else {
            (None, None)
        };
        let classifier = Linear::new(
            &mut params,
            "classifier",
            config.fused_dim(),
            EmotionLabel::COUNT,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            audio,
            text,
            cma1,
            cma2,
            classifier,
        })
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    /// Forward pass over a padded batch. Masks must mark a valid prefix of
    /// every row; padded frames never enter the computation.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape<'_, T>,
        batch: &Batch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let audio = match self.audio {
            Some(_) => {
                if batch.audio_dim != self.config.audio_dim {
                    return Err(ModelError::Input(format!(
                        "audio features have dim {}, model expects {}",
                        batch.audio_dim, self.config.audio_dim
                    )));
                }
                let lengths = batch.audio_lengths().map_err(ModelError::Input)?;
                Some(pack(tape, &batch.audio, batch.audio_frames, batch.audio_dim, lengths)?)
            }
            None => None,
        };
        let text = match self.text {
            Some(_) => {
                if batch.text_dim != self.config.text_dim {
                    return Err(ModelError::Input(format!(
                        "text features have dim {}, model expects {}",
                        batch.text_dim, self.config.text_dim
                    )));
                }
                let lengths = batch.text_lengths().map_err(ModelError::Input)?;
                Some(pack(tape, &batch.text, batch.text_frames, batch.text_dim, lengths)?)
            }
            None => None,
        };
        self.forward_packed(tape, audio, text, mode, rng)
    }

    /// Forward pass over already packed feature sequences.
    pub fn forward_packed<R: Rng + ?Sized>(
        &self,
        tape: &mut GradTape<'_, T>,
        audio: Option<PackedSeq>,
        text: Option<PackedSeq>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let missing = |what: &str| ModelError::Input(format!("{what} features are required in {} mode", self.mode()));
        let mut bn_stats = Vec::new();
        let ha = match &self.audio {
            Some(enc) => {
                let x = audio.ok_or_else(|| missing("audio"))?;
                let (h, stats) = enc.forward(tape, &x, mode, rng)?;
                bn_stats = stats;
                Some(h)
            }
            None => None,
        };
        let ht = match &self.text {
            Some(proj) => Some(proj.forward(tape, &text.ok_or_else(|| missing("text"))?)?),
            None => None,
        };
        let (fused, cma1, cma2) = match (&self.cma1, &self.cma2, &ha, &ht) {
            (Some(c1), Some(c2), Some(a), Some(t)) => {
                let o1 = c1.attend_packed(tape, a, t)?;
                let o2 = c2.attend_packed(tape, t, a)?;
                let p1 = stats_pool_packed(tape, &a.with_data(o1.out))?;
                let p2 = stats_pool_packed(tape, &t.with_data(o2.out))?;
                (tape.concat(&[p1, p2], 1)?, Some(o1), Some(o2))
            }
            (None, None, Some(a), None) => (stats_pool_packed(tape, a)?, None, None),
            (None, None, None, Some(t)) => (stats_pool_packed(tape, t)?, None, None),
            _ => unreachable!("model streams match its mode"),
        };
        let logits = self.classifier.forward(tape, fused)?;
        Ok(ForwardOutput {
            logits,
            fused,
            audio: ha,
            text: ht,
            cma1,
            cma2,
            bn_stats,
        })
    }

    /// Eval-mode logits, one row per sample.
    pub fn logits(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut tape = GradTape::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, batch, Mode::Eval, &mut rng)?;
        Ok(tape
            .value(out.logits)
            .chunks(EmotionLabel::COUNT)
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<EmotionLabel>> {
        Ok(self
            .logits(batch)?
            .iter()
            .map(|row| {
                let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                EmotionLabel::from_index(best).expect("four logits")
            })
            .collect())
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_batch_norm(&mut self, stats: &[BatchStats]) {
        if let Some(enc) = &mut self.audio {
            for (bn, s) in enc.batch_norms_mut().into_iter().zip(stats) {
                bn.update(s);
            }
        }
    }

    /// Batch-norm layers with their parameter-name prefixes.
    pub fn batch_norms(&self) -> Vec<(&'static str, &BatchNorm)> {
        match &self.audio {
            Some(enc) => {
                let [a, b] = enc.batch_norms();
                vec![("audio.bn1", a), ("audio.bn2", b)]
            }
            None => Vec::new(),
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<(&'static str, &mut BatchNorm)> {
        match &mut self.audio {
            Some(enc) => {
                let [a, b] = enc.batch_norms_mut();
                vec![("audio.bn1", a), ("audio.bn2", b)]
            }
            None => Vec::new(),
        }
    }

    /// Parameter element counts per top-level component.
    pub fn component_sizes(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.params.iter() {
            let top = p.name.split('.').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(n, _)| *n == top) {
                Some((_, c)) => *c += p.tensor.numel(),
                None => out.push((top, p.tensor.numel())),
            }
        }
        out
    }

    pub fn cma_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("cma"))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Parameters of the audio feature encoder and the text projection.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("audio.") || p.name.starts_with("text."))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_encoders_trainable(&mut self, on: bool) {
        for id in self.encoder_params() {
            self.params.set_trainable(id, on);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            audio: self.audio.clone(),
            text: self.text.clone(),
            cma1: self.cma1.clone(),
            cma2: self.cma2.clone(),
            classifier: self.classifier.clone(),
        }
    }
}
