//! AdamW training loop, PK sampling, checkpoints and run directories.

mod checkpoint;
mod optim;
mod run;
mod sampler;
mod step;

pub use checkpoint::{
    encode_checkpoint, load_checkpoint, save_checkpoint, sha256_file, sha256_hex, Checkpoint, CHECKPOINT_MAGIC,
};
pub use optim::{adamw_update, lr_at, AdamWConfig, AdamWState};
pub use run::{
    ablation_rows, embed_split, evaluate_run, run_ablation, run_sweep, train_run, AblationRow, RunSummary,
    Variant, DEFAULT_SWEEP,
};
pub use sampler::{pk_sample, PkBatch, PkPool};
pub use step::{StepRecord, Trainer};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossWeights;
use crate::model::{ModelConfig, ModelError};
use crate::synthdata::{AugmentConfig, DataConfig, DataError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}; batch ids: {ids:?}")]
    NonFinite {
        what: String,
        step: usize,
        ids: Vec<String>,
    },
    #[error("io {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("refusing to overwrite non-empty run directory {0}")]
    Exists(String),
    #[error("evaluation: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    /// Labels per batch.
    pub p: usize,
    /// Instances per label and modality; batch size is `2·P·K`.
    pub k: usize,
    /// Optimizer steps per epoch; derived from the training pool when unset.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub warmup_frac: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub image_size: usize,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Off by default: at a few hundred steps every op costs more accuracy than it buys.
    pub augment: AugmentConfig,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub eval_block: usize,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            p: 4,
            k: 4,
            steps_per_epoch: None,
            lr: 1e-3,
            warmup_frac: 0.05,
            optimizer: AdamWConfig::default(),
            seed: 0,
            image_size: 64,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            augment: AugmentConfig::identity(),
            checkpoint_every: 0,
            eval_block: 64,
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn batch_size(&self) -> usize {
        2 * self.p * self.k
    }

    /// Model config with the run's image size applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.p < 2 || self.k == 0 {
            return bad(format!("need P >= 2 and K >= 1, got P={} K={}", self.p, self.k));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} not in [0,1)", self.warmup_frac));
        }
        if self.eval_block == 0 {
            return bad("eval_block must be positive".into());
        }
        self.loss.validate().map_err(TrainError::Config)?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }
}
