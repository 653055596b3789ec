//! Declarative run configuration: one JSON document with a section per module.
//! Unknown keys are rejected at every level; omitted keys take the
//! reference Log-Mel settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::features::{FeatureMode, StftConfig};
use crate::losses::ContrastiveConfig;
use crate::model::{ArcFaceConfig, BackboneConfig, FphConfig, ModelConfig};
use crate::training::TrainConfig;

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub feature_mode: FeatureMode,
    pub train: TrainConfig,
    pub stft: StftConfig,
    pub backbone: BackboneConfig,
    pub fph: FphConfig,
    pub arcface: ArcFaceConfig,
    pub contrastive: ContrastiveConfig,
    pub eval: EvalOptions,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_model(&ModelConfig::paper_logmel(0))
    }
}

impl RunConfig {
    fn from_model(m: &ModelConfig) -> Self {
        Self {
            feature_mode: m.feature_mode,
            train: TrainConfig::default(),
            stft: m.stft.clone(),
            backbone: m.backbone.clone(),
            fph: m.fph.clone(),
            arcface: m.arcface.clone(),
            contrastive: ContrastiveConfig::default(),
            eval: EvalOptions::default(),
            paths: PathsConfig::default(),
        }
    }

    pub fn paper_logmel() -> Self {
        Self::default()
    }

    pub fn paper_tfst() -> Self {
        Self::from_model(&ModelConfig::paper_tfst(0))
    }

    /// The settings a checkpoint was trained with.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            train: ckpt.train.clone(),
            contrastive: ckpt.contrastive.clone(),
            ..Self::from_model(&ckpt.model)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Model description for a corpus with `num_classes` machine IDs.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            feature_mode: self.feature_mode,
            stft: self.stft.clone(),
            backbone: self.backbone.clone(),
            fph: self.fph.clone(),
            arcface: self.arcface.clone(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.stft.validate()?;
        if !(self.contrastive.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.contrastive.temperature)));
        }
        if let Some(r) = self.fph.reduction {
            if r == 0 || r > self.backbone.embedding_dim {
                return Err(Error::Config(format!(
                    "fph.reduction must be in [1, {}], got {r}",
                    self.backbone.embedding_dim
                )));
            }
        }
        if !(self.eval.p > 0.0 && self.eval.p <= 1.0) {
            return Err(Error::Config(format!("eval.p must be in (0, 1], got {}", self.eval.p)));
        }
        Ok(())
    }
}
