//! Run configuration: one struct drives dataset generation, training,
//! evaluation, and reporting. Every field has a default; files round-trip
//! losslessly through TOML.

use crate::data::ScenarioId;
use crate::error::{Error, Result};
use crate::hash::{fnv1a64, hex64};
use crate::loss::vcc::ConsistencyConfig;
use crate::model::ModelDims;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Scenario-branch expansion with the consistency constraint.
    Unifier,
    /// Train everything on the current task only (lower bound).
    Finetune,
    /// Retrain on all data seen so far at every step (upper bound).
    Joint,
    /// No training at all.
    ZeroShot,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Unifier => "unifier",
            Mode::Finetune => "finetune",
            Mode::Joint => "joint",
            Mode::ZeroShot => "zero_shot",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "unifier" => Some(Mode::Unifier),
            "finetune" => Some(Mode::Finetune),
            "joint" => Some(Mode::Joint),
            "zero_shot" => Some(Mode::ZeroShot),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs_initial: usize,
    pub epochs_later: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> ScheduleConfig {
        ScheduleConfig {
            epochs_initial: 20,
            epochs_later: 10,
            base_lr: 3e-3,
            warmup_frac: 0.03,
            weight_decay: 0.01,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training images per scenario pool (split across that scenario's steps).
    pub train_per_scenario: usize,
    pub test_per_scenario: usize,
    /// When set, read datasets from disk instead of generating in memory.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig { train_per_scenario: 96, test_per_scenario: 24, dataset_dir: None }
    }
}

/// Generic warmup phase before the continual stream: every mode starts from
/// the same base model trained on a mixed, stream-disjoint pool. Zero-shot
/// evaluates exactly this base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub images_per_scenario: usize,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> PretrainConfig {
        PretrainConfig { enabled: true, images_per_scenario: 24, epochs: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Number of continual steps (T).
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub scenarios: Vec<ScenarioId>,
    /// Seed for the step-order shuffle.
    pub stream_seed: u64,
    /// Seed for dataset generation.
    pub data_seed: u64,
    pub model: ModelDims,
    pub vcc: ConsistencyConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            mode: Mode::Unifier,
            steps: 4,
            seeds: vec![1],
            scenarios: ScenarioId::ALL.to_vec(),
            stream_seed: 1993,
            data_seed: 7,
            model: ModelDims::default(),
            vcc: ConsistencyConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::config("scenarios", "at least one scenario required"));
        }
        let mut sorted = self.scenarios.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.scenarios.len() {
            return Err(Error::config("scenarios", "scenario list contains duplicates"));
        }
        if self.steps == 0 || self.steps % self.scenarios.len() != 0 {
            return Err(Error::config(
                "steps",
                format!(
                    "T={} must be a positive multiple of the scenario count {}",
                    self.steps,
                    self.scenarios.len()
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        if self.schedule.batch_size == 0 {
            return Err(Error::config("batch_size", "batch size must be positive"));
        }
        if self.schedule.epochs_initial == 0 || self.schedule.epochs_later == 0 {
            return Err(Error::config("epochs", "epoch counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.schedule.warmup_frac) || self.schedule.warmup_frac <= 0.0 {
            return Err(Error::config("warmup_frac", "must lie strictly between 0 and 1"));
        }
        if self.schedule.base_lr <= 0.0 {
            return Err(Error::config("base_lr", "learning rate must be positive"));
        }
        if self.data.train_per_scenario == 0 || self.data.test_per_scenario == 0 {
            return Err(Error::config("data", "per-scenario sample counts must be positive"));
        }
        if self.pretrain.enabled && (self.pretrain.images_per_scenario == 0 || self.pretrain.epochs == 0) {
            return Err(Error::config("pretrain", "pretraining sizes must be positive when enabled"));
        }
        let subsets = self.steps / self.scenarios.len();
        if self.data.train_per_scenario < subsets {
            return Err(Error::config(
                "train_per_scenario",
                format!("{} images cannot fill {subsets} subsets", self.data.train_per_scenario),
            ));
        }
        self.model.validate()?;
        self.vcc.validate()?;
        Ok(())
    }

    /// Stable fingerprint of everything that affects results.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        hex64(fnv1a64(canon.as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_names_the_offending_field() {
        let mut cfg = RunConfig::default();
        cfg.steps = 5;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "steps"));
        assert!(err.to_string().contains("T=5"));

        let mut cfg = RunConfig::default();
        cfg.schedule.base_lr = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "base_lr"));
    }

    #[test]
    fn two_scenario_t2_is_valid() {
        let mut cfg = RunConfig::default();
        cfg.steps = 2;
        cfg.scenarios = vec![ScenarioId::Underwater, ScenarioId::Indoor];
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.vcc.tau = 3.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.steps = 8;
        cfg.seeds = vec![3, 5, 9];
        cfg.vcc.lambda_vcc = 0.25;
        cfg.data.dataset_dir = Some(PathBuf::from("datasets"));
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        // And through JSON, which the config echo files use.
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = RunConfig::from_toml("stepz = 4\n").unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }
}
