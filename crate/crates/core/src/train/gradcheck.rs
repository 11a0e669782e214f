use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trainer::TrainError;
use crate::data::{Batch, EmotionLabel, FeatureSequence, Modality, UtteranceSample};
use crate::layers::Mode;
use crate::model::{param_group, Model, ModelConfig, PARAM_GROUPS};
use crate::seed::rng_for;
use crate::tensor::{GradCheckStats, GradTape};

/// Largest accepted relative error of the end-to-end check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: &'static str,
    pub stats: GradCheckStats,
    /// Elements whose difference quotient was retaken with a smaller step
    /// because the probe flipped a ReLU unit.
    pub kink_retries: usize,
}

impl GroupCheck {
    pub fn passed(&self) -> bool {
        self.stats.count > 0 && self.stats.max_relative < GRADCHECK_TOLERANCE
    }
}

fn random_sample(rng: &mut ChaCha8Rng, cfg: &ModelConfig, i: usize, audio: usize, text: usize) -> UtteranceSample {
    let mut seq = |m, n, d| FeatureSequence::new(m, n, d, (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    UtteranceSample {
        id: format!("g{i}"),
        session: 1,
        audio: seq(Modality::Audio, audio, cfg.audio_dim),
        text: seq(Modality::Text, text, cfg.text_dim),
        label: EmotionLabel::ALL[i % 4],
    }
}

/// Loss plus the on/off pattern of every ReLU unit in the graph.
fn loss(model: &Model<f64>, batch: &Batch) -> Result<(f64, Vec<bool>), TrainError> {
    let mut tape = GradTape::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&mut tape, batch, Mode::Train, &mut rng)?;
    let l = tape.cross_entropy(out.logits, &batch.label_indices())?;
    let mut pattern = Vec::new();
    for v in tape.vars() {
        if tape.op_name(v) == "relu" {
            pattern.extend(tape.value(v).iter().map(|&x| x > 0.0));
        }
    }
    Ok((tape.item(l).expect("scalar"), pattern))
}

/// Compares every parameter gradient of the tiny fused model's train-mode
/// cross-entropy against central differences with step `eps`, grouped by
/// layer kind.
pub fn model_gradient_check(seed: u64, eps: f64) -> Result<Vec<GroupCheck>, TrainError> {
    let cfg = ModelConfig::tiny();
    let mut model = Model::<f64>::new(cfg.clone(), seed)?;
    let mut rng = rng_for(seed, "gradcheck-data");
    let samples = [
        random_sample(&mut rng, &cfg, 0, 9, 3),
        random_sample(&mut rng, &cfg, 1, 14, 5),
        random_sample(&mut rng, &cfg, 2, 6, 2),
    ];
    let batch = Batch::from_samples(&samples.iter().collect::<Vec<_>>());

    let grads = {
        let mut tape = GradTape::new(&model.params);
        let out = model.forward(&mut tape, &batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))?;
        let l = tape.cross_entropy(out.logits, &batch.label_indices())?;
        tape.backward(l)?
    };
    let (_, base_pattern) = loss(&model, &batch)?;
    let mut groups: Vec<GroupCheck> = PARAM_GROUPS
        .iter()
        .map(|&group| GroupCheck {
            group,
            stats: GradCheckStats::default(),
            kink_retries: 0,
        })
        .collect();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let group = param_group(&model.params.get(id).name);
        let analytic = grads.param(id).expect("every parameter is reachable").to_vec();
        let slot = groups.iter_mut().find(|g| g.group == group).expect("known group");
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params.tensor(id).data()[i];
            let mut step = eps;
            let numeric = loop {
                model.params.get_mut(id).tensor.data_mut()[i] = orig + step;
                let (up, up_pattern) = loss(&model, &batch)?;
                model.params.get_mut(id).tensor.data_mut()[i] = orig - step;
                let (down, down_pattern) = loss(&model, &batch)?;
                model.params.get_mut(id).tensor.data_mut()[i] = orig;
                let smooth = up_pattern == base_pattern && down_pattern == base_pattern;
                if smooth || step < eps * 1e-3 {
                    break (up - down) / (2.0 * step);
                }
                slot.kink_retries += 1;
                step /= 10.0;
            };
            slot.stats.record(a, numeric, ABS_FLOOR);
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_group_passes() {
        let groups = model_gradient_check(0, 1e-4).unwrap();
        assert_eq!(groups.len(), PARAM_GROUPS.len());
        for g in &groups {
            assert!(g.passed(), "{}: {:?}", g.group, g.stats);
        }
    }
}
