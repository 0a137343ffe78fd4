//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::BlockConfig;
use crate::criteria::TrainingCriterion;
use crate::engine::{FoldMask, InputKind, ModelConfig};
use crate::error::{Error, Result};
use crate::io::data::DataConfig;
use crate::trainer::TrainerConfig;

/// Environment variable that replaces `trainer.seed`.
pub const SEED_ENV: &str = "FOLDNET_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(flatten)]
    pub block: BlockConfig,
    pub n_physical: usize,
    pub max_depth: usize,
    /// All layers foldable when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<FoldMask>,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub trainer: TrainerConfig,
    pub criterion: TrainingCriterion,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file, then applies `FOLDNET_SEED`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.trainer.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let (input_kind, input_dim) = if self.data.uses_features() {
            (InputKind::Features, self.data.feature_dim)
        } else {
            (InputKind::Tokens, m.vocab + 1)
        };
        ModelConfig {
            block: m.block.clone(),
            n_physical: m.n_physical,
            max_depth: m.max_depth,
            mask: m
                .mask
                .clone()
                .unwrap_or_else(|| FoldMask::all(m.n_physical)),
            vocab: m.vocab,
            input_kind,
            input_dim,
            use_decoder: self.criterion.use_decoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.trainer.validate()?;
        self.criterion.validate()?;
        self.data.validate(self.model.vocab)?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }
}
