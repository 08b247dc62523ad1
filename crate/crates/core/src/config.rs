//! The single JSON run configuration with `model`, `mask`, `loss`, `train`
//! and `eval` sections. Unknown keys are rejected by name.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::masking::MaskConfig;
use crate::metrics::DcfParams;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    /// Global-norm gradient clipping; `null` disables it.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_log_every() -> u64 {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            learning_rate: default_lr(),
            optimizer: default_optimizer(),
            seed: 0,
            grad_clip: default_clip(),
            checkpoint_every: 0,
            log_every: default_log_every(),
            manifest: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.steps < 1 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("train.grad_clip must be > 0 or null".into()));
        }
        if self.log_every < 1 {
            return Err(Error::Config("train.log_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub dcf: DcfParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.dcf.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
