//! The retrieval network: modality-specific patch embeddings, a shared
//! hierarchical backbone (conv stages then selective-scan mixer stages),
//! an auxiliary geometric encoder feeding feature injection at intermediate
//! stages, single-channel deep-supervision heads and a 1024-d embedding.

mod gfi;
mod layers;
mod net;
mod params;
mod ssm;

pub use gfi::{GfiCross, GfiInject, GfiStage, Pairing};
pub use layers::{
    from_tokens, gather_rows, to_tokens, BatchNorm, Conv2d, CrossAttention, LayerNorm, Linear, Mlp,
};
pub use net::{AuxEncoder, DsHeads, DsMaps, GeoMamba, ModelInput, Outputs};
pub use params::{BufferId, Builder, Fwd, Init, Param, ParamId, ParamStore, RunningStats};
pub use ssm::{discretized_decay, SsmBlock, SsmParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Opt,
    Sar,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Opt => "opt",
            Modality::Sar => "sar",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Opt => Modality::Sar,
            Modality::Sar => Modality::Opt,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "opt" | "optical" => Ok(Modality::Opt),
            "sar" => Ok(Modality::Sar),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv,
    SsmMixer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
    pub kind: BlockKind,
    pub depth: usize,
    /// Feature injection after this stage's blocks.
    pub gfi: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Master switch for feature injection; per-stage flags apply when on.
    pub gfi_enabled: bool,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub state_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Keep the auxiliary geometric encoder at its initial weights.
    pub freeze_aux: bool,
    /// Odd kernel size of the mask prediction heads.
    pub ds_kernel: usize,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let stage = |channels, stride, kind, gfi| StageConfig {
            channels,
            stride,
            kind,
            depth: 1,
            gfi,
        };
        Self {
            image_size: 64,
            in_channels: 3,
            stages: vec![
                stage(16, 4, BlockKind::Conv, false),
                stage(32, 2, BlockKind::Conv, true),
                stage(64, 2, BlockKind::SsmMixer, true),
                stage(128, 2, BlockKind::SsmMixer, false),
            ],
            gfi_enabled: true,
            heads: 4,
            mlp_ratio: 4,
            state_dim: 8,
            embed_dim: 1024,
            num_classes: 8,
            freeze_aux: false,
            ds_kernel: 3,
            ln_eps: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    /// Spatial side of stage `i`'s output.
    pub fn stage_side(&self, i: usize) -> usize {
        let s: usize = self.stages[..=i].iter().map(|s| s.stride).product();
        self.image_size / s
    }

    pub fn gfi_stages(&self) -> Vec<usize> {
        if !self.gfi_enabled {
            return Vec::new();
        }
        (0..self.stages.len()).filter(|&i| self.stages[i].gfi).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.stages.len() != 4 {
            return err(format!("need 4 stages, got {}", self.stages.len()));
        }
        if self.total_stride() != 32 {
            return err(format!("strides compound to {}, expected 32", self.total_stride()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return err(format!("image size {} not a multiple of 32", self.image_size));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.num_classes < 2 {
            return err("in_channels, embed_dim must be positive and num_classes >= 2".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 {
                return err(format!("stage {i}: zero channels or stride"));
            }
            if s.gfi && (i == 0 || i + 1 == self.stages.len()) {
                return err(format!("stage {i}: injection only at intermediate stages"));
            }
            if s.gfi && s.channels % self.heads.max(1) != 0 {
                return err(format!("stage {i}: {} channels not divisible by heads", s.channels));
            }
        }
        if self.heads == 0 || self.mlp_ratio == 0 || self.state_dim == 0 {
            return err("heads, mlp_ratio and state_dim must be positive".into());
        }
        if self.ds_kernel.is_multiple_of(2) {
            return err(format!("ds_kernel {} must be odd", self.ds_kernel));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return err("bn_momentum must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
