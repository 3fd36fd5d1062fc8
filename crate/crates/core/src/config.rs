//! Run configuration: one TOML file, unknown keys rejected, every default
//! visible through [`RunConfig::dump_defaults`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::PositionPolicy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::streamer::ScheduleConfig;
use crate::trainer::{DriftConfig, TrainConfig};

pub const SEED_ENV: &str = "EW_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory for nets, reports and streams.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("ew-out"),
        }
    }
}

impl PathsConfig {
    pub fn generator(&self) -> PathBuf {
        self.out_dir.join("generator.ewnt")
    }
    pub fn fusion(&self) -> PathBuf {
        self.out_dir.join("fusion.ewfu")
    }
    pub fn train_log(&self) -> PathBuf {
        self.out_dir.join("train.jsonl")
    }
    pub fn drift_log(&self) -> PathBuf {
        self.out_dir.join("drift.jsonl")
    }
    pub fn stream(&self) -> PathBuf {
        self.out_dir.join("stream.ewls")
    }
    pub fn state(&self) -> PathBuf {
        self.out_dir.join("state.ewsn")
    }
    pub fn stream_report(&self) -> PathBuf {
        self.out_dir.join("stream_report.json")
    }
    pub fn bench(&self) -> PathBuf {
        self.out_dir.join("bench.csv")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; overridden by `EW_SEED`.
    pub seed: u64,
    pub positions: PositionPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub drift: DriftConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.generator.validate()?;
        self.model.fusion_config()?;
        self.train.validate()?;
        self.schedule.validate(self.model.generator.window_frames)?;
        if self.schedule.feature_latents != self.model.fusion.feature_latents {
            return Err(Error::Config(format!(
                "schedule.feature_latents ({}) must equal model.fusion.feature_latents ({})",
                self.schedule.feature_latents, self.model.fusion.feature_latents
            )));
        }
        Ok(())
    }

    pub fn dump_defaults() -> String {
        toml::to_string_pretty(&Self::default()).expect("default config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Training config with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// SHA-256 of the canonical JSON encoding of the whole config.
    pub fn hash(&self) -> [u8; 32] {
        sha(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    /// Hash of the model architecture only; net files carry this one.
    pub fn model_hash(&self) -> [u8; 32] {
        sha(&serde_json::to_vec(&self.model).expect("model config serializes"))
    }
}

fn sha(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_dump() {
        let text = RunConfig::dump_defaults();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
        assert!(text.contains("lambda_3d = 0.1"));
        assert!(text.contains("long_context = 18"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nlearning_rate = 1.0"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[train]\nsteps = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.lambda_3d, 0.1);
        assert_eq!(cfg.train_config().seed, 9);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.model_hash(), b.model_hash());
        assert_eq!(a.hash_hex().len(), 64);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[train]\nlr = -1.0").is_err());
        assert!(RunConfig::from_toml("[schedule]\nlong_context = 40").is_err());
    }
}
