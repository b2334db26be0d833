//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_ECE_BINS;
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;

pub const DEFAULT_ALPHAS: [f64; 4] = [1.0, 100.0, 500.0, 1000.0];

fn default_lr() -> f64 {
    0.01
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_epochs() -> usize {
    100
}
fn default_warmup() -> usize {
    5
}
fn default_batch() -> usize {
    128
}
fn default_bins() -> usize {
    DEFAULT_ECE_BINS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Every random draw of a run (init, data, shuffling, MC sampling)
    /// derives from this value.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_sweep: Option<Vec<f64>>,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
}

impl TrainConfig {
    /// The two-moons run: SGD, lr 0.01, weight decay 0.05, cosine schedule
    /// with 5 warmup epochs, batch 128, 100 epochs.
    pub fn two_moons() -> Self {
        TrainConfig {
            model: ModelConfig::two_moons(),
            optimizer: OptimizerConfig::default(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            warmup_epochs: default_warmup(),
            batch_size: default_batch(),
            seed: 0,
            dataset: DatasetSpec::default(),
            alpha_sweep: None,
            ece_bins: DEFAULT_ECE_BINS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.dataset.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "need epochs ≥ warmup_epochs and epochs > 0, got {} / {}",
                self.epochs, self.warmup_epochs
            )));
        }
        if self.batch_size == 0 || self.ece_bins == 0 {
            return Err(Error::Config("batch_size and ece_bins must be positive".into()));
        }
        if let Some(a) = &self.alpha_sweep {
            if a.is_empty() || a.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("alpha_sweep must be a nonempty list of positive values".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
