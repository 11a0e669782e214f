use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-7,
        }
    }
}

/// Reduce-on-plateau: when the monitored loss has not strictly improved for
/// `patience` consecutive epochs, the learning rate is multiplied by
/// `factor` (never going below `min_lr`, never rising).
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub config: SchedulerConfig,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self {
            config,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch's monitored loss and returns the learning rate to
    /// use next.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.config.patience {
            return lr;
        }
        self.bad_epochs = 0;
        let next = lr * self.config.factor;
        if next < self.config.min_lr {
            self.config.min_lr.min(lr)
        } else {
            next
        }
    }
}
