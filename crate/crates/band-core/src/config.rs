//! Resolved model/profile configuration shared by models, training, and the CLI.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which of the four architectures a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cnn3d,
    Resnet3d,
    Band,
    BandLstm,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn3d" => Ok(ModelKind::Cnn3d),
            "resnet3d" => Ok(ModelKind::Resnet3d),
            "band" => Ok(ModelKind::Band),
            "band-lstm" => Ok(ModelKind::BandLstm),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected cnn3d|resnet3d|band|band-lstm)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Cnn3d => "cnn3d",
            ModelKind::Resnet3d => "resnet3d",
            ModelKind::Band => "band",
            ModelKind::BandLstm => "band-lstm",
        }
    }
}

/// Size profile: scaled-down defaults for everyday runs, paper-scale
/// dimensions for shape checks, and a minimal setup for f64 gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    HcpShape,
    Tiny,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "hcp-shape" => Ok(Profile::HcpShape),
            "tiny" => Ok(Profile::Tiny),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected desk|hcp-shape|tiny)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::HcpShape => "hcp-shape",
            Profile::Tiny => "tiny",
        }
    }
}

/// Frame embedder: conv1 + four residual stages + global average pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub in_channels: usize,
    /// Channel widths of the four residual stages; the embedding dim is
    /// `widths[3]`.
    pub widths: [usize; 4],
    /// Stride-2 max pool after the stem conv, as in the full-size ResNet
    /// stem; small-extent profiles skip it to keep feature maps nonempty.
    pub stem_pool: bool,
    pub batch_norm: bool,
    pub bn_eps: f64,
    /// EMA factor for running statistics: new = (1-m)*old + m*batch.
    pub bn_momentum: f64,
}

/// Pooling-token transformer head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Post-norm (false) follows the original transformer; pre-norm is an
    /// opt-in variant.
    pub pre_norm: bool,
}

/// Recurrent head used by the LSTM variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

/// Everything needed to build any of the four models deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub profile: Profile,
    pub classes: usize,
    /// Clip length k: frames fed to one forward pass.
    pub window: usize,
    /// Spatial extents of one frame.
    pub extents: [usize; 3],
    pub embedder: EmbedderConfig,
    pub transformer: TransformerConfig,
    pub lstm: LstmConfig,
    /// Channel widths of the plain 4-conv baseline.
    pub cnn3d_widths: [usize; 4],
    /// Hidden width of the plain baseline's classifier.
    pub cnn3d_hidden: usize,
}

impl ModelConfig {
    /// Scaled-down topology for real (CPU-budget) experiments: 16-cube
    /// frames, embedding dim 64.
    pub fn desk(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            profile: Profile::Desk,
            classes: 7,
            window: 16,
            extents: [16, 16, 16],
            embedder: EmbedderConfig {
                in_channels: 1,
                widths: [8, 16, 32, 64],
                // The last stage of a 16-cube input is a single voxel per
                // channel, which makes per-sample batch statistics
                // degenerate (zero variance), so normalization stays off
                // at this scale.
                batch_norm: false,
                stem_pool: false,
                bn_eps: 1e-5,
                bn_momentum: 0.1,
            },
            transformer: TransformerConfig {
                d_model: 64,
                heads: 4,
                layers: 2,
                ff_dim: 256,
                dropout: 0.2,
                pre_norm: false,
            },
            lstm: LstmConfig { hidden: 32, layers: 2, bidirectional: false },
            cnn3d_widths: [8, 16, 32, 64],
            cnn3d_hidden: 64,
        }
    }

    /// Paper-scale dimensions; used for forward-only shape checks.
    pub fn hcp_shape(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            profile: Profile::HcpShape,
            classes: 7,
            window: 28,
            extents: [75, 93, 81],
            embedder: EmbedderConfig {
                in_channels: 1,
                widths: [64, 128, 256, 512],
                batch_norm: true,
                stem_pool: true,
                bn_eps: 1e-5,
                bn_momentum: 0.1,
            },
            transformer: TransformerConfig {
                d_model: 512,
                heads: 8,
                layers: 2,
                ff_dim: 2048,
                dropout: 0.2,
                pre_norm: false,
            },
            lstm: LstmConfig { hidden: 128, layers: 2, bidirectional: false },
            cnn3d_widths: [64, 128, 256, 512],
            cnn3d_hidden: 64,
        }
    }

    /// Minimal topology for f64 finite-difference checks of full models.
    pub fn tiny(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            profile: Profile::Tiny,
            classes: 3,
            window: 4,
            extents: [8, 8, 8],
            embedder: EmbedderConfig {
                in_channels: 1,
                widths: [4, 8, 16, 32],
                batch_norm: false,
                stem_pool: false,
                bn_eps: 1e-5,
                bn_momentum: 0.1,
            },
            transformer: TransformerConfig {
                d_model: 32,
                heads: 2,
                layers: 2,
                ff_dim: 64,
                dropout: 0.2,
                pre_norm: false,
            },
            lstm: LstmConfig { hidden: 16, layers: 2, bidirectional: false },
            cnn3d_widths: [4, 8, 16, 32],
            cnn3d_hidden: 16,
        }
    }

    pub fn for_profile(profile: Profile, kind: ModelKind) -> Self {
        match profile {
            Profile::Desk => Self::desk(kind),
            Profile::HcpShape => Self::hcp_shape(kind),
            Profile::Tiny => Self::tiny(kind),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.window == 0 {
            return Err(Error::Config("window (k) must be >= 1".into()));
        }
        if self.transformer.d_model != self.embedder.widths[3] {
            return Err(Error::Config(format!(
                "d_model {} must equal the embedding dim {} (last stage width)",
                self.transformer.d_model, self.embedder.widths[3]
            )));
        }
        if self.transformer.d_model % self.transformer.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.transformer.d_model, self.transformer.heads
            )));
        }
        if self.transformer.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for sinusoidal positions".into()));
        }
        if !(0.0..1.0).contains(&self.transformer.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.transformer.dropout
            )));
        }
        if self.extents.iter().any(|&e| e < 8) {
            return Err(Error::Config(format!(
                "spatial extents {:?} too small: every axis must be >= 8 so all stride-2 stages stay nonempty",
                self.extents
            )));
        }
        if self.transformer.layers == 0 || self.lstm.layers == 0 {
            return Err(Error::Config("layer counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON encoding; ties checkpoints and
    /// embedding caches to the exact configuration that produced them.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}
