use std::path::Path;

use cmer::data::SyntheticSpec;
use cmer::train::SchedulerConfig;
use cmer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs. Missing sections and keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scheduler: SchedulerConfig,
    pub synthetic: SyntheticSpec,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.conv_channels, 256);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.train.adam.lr, 1e-5);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::parse("[model]\nmode = \"audio\"\n[train]\nepochs = 3\nlr = 0.001\n").unwrap();
        assert_eq!(cfg.model.mode, cmer::ModelMode::Audio);
        assert_eq!(cfg.model.lstm_hidden, 128);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.adam.lr, 1e-3);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[model]\nheadz = 4\n", "[train]\nlearning_rate = 1.0\n", "[extra]\n", "[scheduler]\npatiense = 1\n"] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn echo_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.train.early_stop_patience = Some(4);
        cfg.synthetic.noise = 0.35;
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
