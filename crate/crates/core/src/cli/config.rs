use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::SyntheticKind;
use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedule::SamplerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic { kind: SyntheticKind, classes: usize, seed: u64 },
    /// Latent container written by `gen-data` or an external encoder.
    Latents { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic { kind: SyntheticKind::Blobs, classes: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: PathBuf::from("run"), checkpoint_every: 0 }
    }
}

impl OutputSpec {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.acdt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataSpec,
    pub output: OutputSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.train.lr.total != self.train.steps {
            return Err(Error::Config(format!(
                "train.lr.total {} differs from train.steps {}",
                self.train.lr.total, self.train.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.train.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.train.ema_decay)));
        }
        self.sampler.timesteps(self.model.timesteps)?;
        // TOML integers are signed 64-bit
        let data_seed = match &self.data {
            DataSpec::Synthetic { seed, .. } => *seed,
            DataSpec::Latents { .. } => 0,
        };
        if self.train.seed > i64::MAX as u64 || data_seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seeds must not exceed {}", i64::MAX)));
        }
        if let DataSpec::Synthetic { kind, classes, .. } = &self.data {
            if *classes != self.model.num_labels {
                return Err(Error::Config(format!(
                    "dataset has {classes} classes, model {} labels",
                    self.model.num_labels
                )));
            }
            if kind.channels() != self.model.channels || kind.rank() != self.model.grid.len() {
                return Err(Error::Config(format!(
                    "{kind:?} data needs rank {} and {} channels",
                    kind.rank(),
                    kind.channels()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_is_idempotent() {
        let mut cfg = RunConfig::default();
        cfg.train.lr.peak = 1.0 / 3.0;
        cfg.model.rope_bases = Some(vec![100.0, 2700.0]);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nlayers = \"two\"").is_err());
        assert!(RunConfig::from_toml("[model]\nlayer = 2").is_err());
        let partial = RunConfig::from_toml("[model]\nlayers = 3\n").unwrap();
        assert_eq!(partial.model.layers, 3);
        assert_eq!(partial.train, TrainConfig::default());
        let mut cfg = RunConfig::default();
        cfg.train.lr.total = 3;
        assert!(cfg.validate().is_err());
    }
}
