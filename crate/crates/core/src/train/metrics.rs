use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::{Batch, EmotionLabel, UtteranceSample};
use crate::model::Model;
use crate::tensor::{GradTape, Scalar};

const K: usize = EmotionLabel::COUNT;

/// Classification metrics on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean recall over the classes present in the set.
    pub unweighted_accuracy: f64,
    /// Fraction of samples classified correctly.
    pub weighted_accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: [[u64; K]; K],
    /// `None` for classes absent from the set.
    pub recall: [Option<f64>; K],
    pub warnings: Vec<String>,
}

impl Metrics {
    pub fn from_predictions(truth: &[EmotionLabel], predicted: &[EmotionLabel]) -> Result<Self, TrainError> {
        if truth.is_empty() {
            return Err(TrainError::EmptySplit("test"));
        }
        assert_eq!(truth.len(), predicted.len(), "one prediction per sample");
        let mut confusion = [[0u64; K]; K];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.index()][p.index()] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: [[u64; K]; K]) -> Self {
        let mut recall = [None; K];
        let mut warnings = Vec::new();
        for (c, row) in confusion.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n == 0 {
                warnings.push(format!(
                    "class {} absent from the test set; excluded from unweighted accuracy",
                    EmotionLabel::ALL[c]
                ));
            } else {
                recall[c] = Some(row[c] as f64 / n as f64);
            }
        }
        let present: Vec<f64> = recall.iter().flatten().copied().collect();
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..K).map(|c| confusion[c][c]).sum();
        Self {
            unweighted_accuracy: present.iter().sum::<f64>() / present.len().max(1) as f64,
            weighted_accuracy: correct as f64 / total.max(1) as f64,
            confusion,
            recall,
            warnings,
        }
    }

    pub fn samples(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Metrics plus mean loss and predictions of one model on one set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub loss: f64,
    pub predictions: Vec<EmotionLabel>,
}

/// Eval-mode pass over `samples` in order.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[&UtteranceSample],
    batch_size: usize,
) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::from_samples(chunk);
        let mut tape = GradTape::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut tape, &batch, crate::layers::Mode::Eval, &mut rng)?;
        let loss = tape.cross_entropy(out.logits, &batch.label_indices())?;
        loss_sum += tape.item(loss).expect("scalar").as_f64() * chunk.len() as f64;
        for row in tape.value(out.logits).chunks(K) {
            let best = (0..K).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            predictions.push(EmotionLabel::ALL[best]);
        }
    }
    let truth: Vec<EmotionLabel> = samples.iter().map(|s| s.label).collect();
    Ok(Evaluation {
        metrics: Metrics::from_predictions(&truth, &predictions)?,
        loss: loss_sum / samples.len() as f64,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: u8,
    pub metrics: Metrics,
    pub loss: f64,
}

/// Per-session results and their arithmetic means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: Vec<SessionReport>,
    pub average_unweighted_accuracy: f64,
    pub average_weighted_accuracy: f64,
}

impl EvalReport {
    pub fn from_sessions(sessions: Vec<SessionReport>) -> Self {
        let n = sessions.len().max(1) as f64;
        let ua = sessions.iter().map(|s| s.metrics.unweighted_accuracy).sum::<f64>() / n;
        let wa = sessions.iter().map(|s| s.metrics.weighted_accuracy).sum::<f64>() / n;
        Self {
            sessions,
            average_unweighted_accuracy: ua,
            average_weighted_accuracy: wa,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use EmotionLabel::*;

    #[test]
    fn perfect_predictor() {
        let truth = [Angry, Happy, Neutral, Sad, Sad];
        let m = Metrics::from_predictions(&truth, &truth).unwrap();
        assert_eq!(m.unweighted_accuracy, 1.0);
        assert_eq!(m.weighted_accuracy, 1.0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v != 0, i == j);
            }
        }
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let truth: Vec<_> = (0..20).map(|i| EmotionLabel::ALL[i % 4]).collect();
        let m = Metrics::from_predictions(&truth, &[Angry; 20]).unwrap();
        assert_eq!(m.unweighted_accuracy, 0.25);
    }

    #[test]
    fn hand_enumerated_recalls() {
        // angry 2/3, happy 1/1, neutral 0/2, sad 1/2
        let truth = [Angry, Angry, Angry, Happy, Neutral, Neutral, Sad, Sad];
        let pred = [Angry, Angry, Sad, Happy, Happy, Sad, Sad, Neutral];
        let m = Metrics::from_predictions(&truth, &pred).unwrap();
        let want = (2.0 / 3.0 + 1.0 + 0.0 + 0.5) / 4.0;
        assert_eq!(m.unweighted_accuracy, want);
        assert_eq!(m.weighted_accuracy, 4.0 / 8.0);
        let rows: Vec<u64> = m.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![3, 1, 2, 2]);
    }

    #[test]
    fn absent_class_is_excluded_with_warning() {
        let truth = [Angry, Happy, Happy];
        let pred = [Angry, Happy, Angry];
        let m = Metrics::from_predictions(&truth, &pred).unwrap();
        assert_eq!(m.unweighted_accuracy, (1.0 + 0.5) / 2.0);
        assert_eq!(m.warnings.len(), 2);
        assert_eq!(m.recall[2], None);
    }
}
