use std::sync::Mutex;

use super::metrics::{evaluate, EvalReport, SessionReport};
use super::scheduler::SchedulerConfig;
use super::trainer::{train, EpochRecord, TrainConfig, TrainError};
use crate::data::synthetic::SESSIONS;
use crate::data::{EmotionLabel, UtteranceSample};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::seed::derive_indexed;
use crate::tensor::Scalar;

pub struct FoldOutcome {
    pub report: SessionReport,
    pub predictions: Vec<EmotionLabel>,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Option<Checkpoint>,
}

pub struct LosoOutcome {
    pub report: EvalReport,
    pub folds: Vec<FoldOutcome>,
}

/// `(train, test)` with `session` as the test set.
pub fn session_split(samples: &[UtteranceSample], session: u8) -> (Vec<&UtteranceSample>, Vec<&UtteranceSample>) {
    samples.iter().partition(|s| s.session != session)
}

/// Runs `fold` once per session `1..=5`, each time testing on that session
/// and training on the other four. With `jobs > 1` folds run on that many
/// threads; results are ordered by session either way.
pub fn run_folds<F>(samples: &[UtteranceSample], jobs: usize, fold: F) -> Result<LosoOutcome, TrainError>
where
    F: Fn(u8, &[&UtteranceSample], &[&UtteranceSample]) -> Result<FoldOutcome, TrainError> + Sync,
{
    if let Some(s) = samples.iter().find(|s| !(1..=SESSIONS).contains(&s.session)) {
        return Err(TrainError::Protocol(format!("sample {} has session {}", s.id, s.session)));
    }
    for session in 1..=SESSIONS {
        if !samples.iter().any(|s| s.session == session) {
            return Err(TrainError::Protocol(format!("session {session} has no samples")));
        }
    }
    let run = |session: u8| {
        let (train_set, test_set) = session_split(samples, session);
        fold(session, &train_set, &test_set)
    };
    let sessions: Vec<u8> = (1..=SESSIONS).collect();
    let results: Vec<Result<FoldOutcome, TrainError>> = if jobs <= 1 {
        sessions.iter().map(|&s| run(s)).collect()
    } else {
        let slots: Vec<Mutex<Option<Result<FoldOutcome, TrainError>>>> =
            sessions.iter().map(|_| Mutex::new(None)).collect();
        let next = Mutex::new(0usize);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(sessions.len()) {
                scope.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().unwrap();
                        let i = *n;
                        *n += 1;
                        i
                    };
                    if i >= sessions.len() {
                        break;
                    }
                    let r = run(sessions[i]);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap().expect("fold ran")).collect()
    };
    let folds = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::from_sessions(folds.iter().map(|f| f.report.clone()).collect());
    Ok(LosoOutcome { report, folds })
}

/// Leave-one-session-out training and evaluation with a fresh model per
/// fold. Fold seeds derive from `seed` and the test session.
pub fn loso_run<T: Scalar>(
    samples: &[UtteranceSample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    scheduler: &SchedulerConfig,
    seed: u64,
    jobs: usize,
) -> Result<LosoOutcome, TrainError> {
    run_folds(samples, jobs, |session, train_set, test_set| {
        let fold_seed = derive_indexed(seed, "fold", session as u64);
        let model = Model::<T>::new(model_config.clone(), fold_seed)?;
        let out = train(model, train_set, test_set, config, scheduler, fold_seed)?;
        let eval = evaluate(&out.model, test_set, config.eval_batch_size)?;
        Ok(FoldOutcome {
            report: SessionReport {
                session,
                metrics: eval.metrics,
                loss: eval.loss,
            },
            predictions: eval.predictions,
            history: out.history,
            checkpoint: Some(out.checkpoint),
        })
    })
}
