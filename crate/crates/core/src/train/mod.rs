//! Optimization, evaluation and the leave-one-session-out protocol.

mod adam;
mod gradcheck;
mod loso;
mod metrics;
mod scheduler;
mod trainer;

pub use adam::{Adam, AdamConfig, OptimError};
pub use gradcheck::{model_gradient_check, GroupCheck, GRADCHECK_TOLERANCE};
pub use loso::{loso_run, run_folds, session_split, FoldOutcome, LosoOutcome};
pub use metrics::{evaluate, EvalReport, Evaluation, Metrics, SessionReport};
pub use scheduler::{PlateauScheduler, SchedulerConfig};
pub use trainer::{history_jsonl, train, EpochRecord, TrainConfig, TrainError, TrainOutcome};
