//! U-Net construction (ResNet-style or plain CNN encoder, shared decoder),
//! encoder freezing, and checkpoint weight transfer.

mod checkpoint;
mod unet;

pub use checkpoint::{
    decode_checkpoint_parts, load_checkpoint, save_checkpoint, CheckpointBundle, CheckpointError,
    CheckpointMeta, TaskKind, CHECKPOINT_FORMAT_VERSION,
};
pub use unet::UNet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch for tensor {name}: {expected:?} vs {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Resnet50,
    SimpleCnn,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "resnet50" => Ok(Self::Resnet50),
            "cnn" | "simple_cnn" => Ok(Self::SimpleCnn),
            other => Err(ModelError::InvalidSpec(format!("unknown encoder {other}"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Resnet50 => "resnet50",
            Self::SimpleCnn => "cnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear 1-channel output clamped to [0,1]; restoration target.
    Restoration,
    /// Sigmoid 1-channel output; segmentation target.
    Segmentation,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub encoder: EncoderKind,
    pub input_size: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub base_channels: usize,
    pub freeze_encoder: bool,
    pub head: HeadKind,
}

impl ArchitectureSpec {
    pub fn new(encoder: EncoderKind, head: HeadKind) -> Self {
        Self {
            encoder,
            input_size: 320,
            encoder_blocks: 4,
            decoder_blocks: 4,
            base_channels: 64,
            freeze_encoder: false,
            head,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.encoder_blocks != self.decoder_blocks {
            return Err(ModelError::InvalidSpec(
                "encoder and decoder block counts must match".into(),
            ));
        }
        if self.encoder_blocks != 4 {
            return Err(ModelError::InvalidSpec(
                "the spatial schedule is fixed at 4 blocks".into(),
            ));
        }
        if self.base_channels == 0 {
            return Err(ModelError::InvalidSpec("base_channels must be > 0".into()));
        }
        // Three halvings must divide the input evenly.
        if self.input_size % 8 != 0 || self.input_size < 8 {
            return Err(ModelError::InvalidSpec(format!(
                "input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial sizes at each encoder block, e.g. 320 -> [320, 160, 80, 40].
    pub fn spatial_schedule(&self) -> [usize; 4] {
        let s = self.input_size;
        [s, s / 2, s / 4, s / 8]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferScope {
    EncoderOnly,
    EncoderAndDecoder,
}
