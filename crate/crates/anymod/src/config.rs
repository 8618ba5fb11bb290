//! Run configuration files.
//!
//! One JSON document configures every command. All sections are optional
//! and fall back to the desk preset; unknown keys anywhere are rejected.
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use anymod_core::cohort::SyntheticCohortConfig;
use anymod_core::finetune::{FinetuneConfig, Task};
use anymod_core::model::ModelConfig;
use anymod_core::train::TrainConfig;
use anymod_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSection {
    /// Manifest file or cohort directory. Without one, commands build the
    /// synthetic cohort described by `synthetic` in memory.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticCohortConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Save a checkpoint every this many steps (the final one is always
    /// saved).
    pub checkpoint_every: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub task: Task,
    /// Seeds for the repeated sweeps.
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    /// Subjects for `attention-map`; empty means every test subject.
    pub subjects: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { task: Task::CnVsAd, seeds: vec![0, 1, 2], fractions: vec![0.1, 0.2, 0.5, 0.8, 1.0], subjects: Vec::new() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cohort: CohortSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(m), Some(dir)) = (&cfg.cohort.manifest, path.parent()) {
            if m.is_relative() {
                cfg.cohort.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// Overrides every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.cohort.synthetic.seed = seed;
        self.train.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.synthetic.validate()?;
        self.model.validate()?;
        let grid = self.model.grid()?;
        if self.cohort.manifest.is_none() && self.cohort.synthetic.volume_shape != self.model.volume_shape {
            return Err(Error::Config("cohort.synthetic.volume_shape differs from model.volume_shape".into()));
        }
        self.train.validate(grid.n_patches())?;
        self.finetune.validate()?;
        if self.pretrain.checkpoint_every == Some(0) {
            return Err(Error::Config("pretrain.checkpoint_every must be positive".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        if self.eval.fractions.is_empty() || self.eval.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("eval.fractions must be nonempty and lie in (0, 1]".into()));
        }
        if self.eval.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.fractions must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"bogus": 1}"#, r#"{"train": {"lr": 1e-4, "lrr": 2}}"#, r#"{"model": {"depth": 3}}"#] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"max_steps": 5}}"#).unwrap();
        assert_eq!(cfg.train.max_steps, Some(5));
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
    }

    #[test]
    fn bad_fractions_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.eval.fractions = vec![0.5, 0.2];
        assert!(cfg.validate().is_err());
    }
}
