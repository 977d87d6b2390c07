use serde::{Deserialize, Serialize};

use crate::corpus::FrameGeometry;
use crate::error::{ensure_arg, Result};

/// How raw inputs become frame feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameEncoderKind {
    /// Inputs are already D-dimensional frame features.
    Identity,
    /// Three conv→ReLU→avg-pool blocks and a global average pool to D channels.
    ToyCnn {
        geometry: FrameGeometry,
        widths: [usize; 2],
    },
}

/// Sequence model over frame tokens. Only self-attention is provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalEncoderKind {
    #[default]
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub frame_encoder: FrameEncoderKind,
    pub temporal_encoder: TemporalEncoderKind,
    /// D: frame feature width.
    pub frame_dim: usize,
    /// d: token width inside the temporal encoder.
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub hash_hidden: usize,
    /// T: frames per clip, also the number of order classes.
    pub clip_length: usize,
    /// K: hash code length in bits.
    pub code_bits: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            frame_encoder: FrameEncoderKind::Identity,
            temporal_encoder: TemporalEncoderKind::Attention,
            frame_dim: 128,
            model_dim: 64,
            num_layers: 1,
            num_heads: 1,
            ffn_dim: 128,
            hash_hidden: 64,
            clip_length: 8,
            code_bits: 16,
        }
    }
}

impl EncoderConfig {
    pub fn order_classes(&self) -> usize {
        self.clip_length
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.frame_dim >= 1, "frame_dim must be positive");
        ensure_arg!(self.model_dim >= 1, "model_dim must be positive");
        ensure_arg!(self.num_heads >= 1, "num_heads must be positive");
        ensure_arg!(
            self.model_dim.is_multiple_of(self.num_heads),
            "model_dim {} not divisible by num_heads {}",
            self.model_dim,
            self.num_heads
        );
        ensure_arg!(self.num_layers >= 1, "num_layers must be positive");
        ensure_arg!(
            self.ffn_dim >= 1 && self.hash_hidden >= 1,
            "hidden widths must be positive"
        );
        ensure_arg!(self.clip_length >= 1, "clip_length must be positive");
        ensure_arg!(self.code_bits >= 1, "code_bits must be positive");
        if let FrameEncoderKind::ToyCnn { geometry, widths } = self.frame_encoder {
            ensure_arg!(
                geometry.height >= 8 && geometry.width >= 8,
                "toy CNN needs frames of at least 8x8"
            );
            ensure_arg!(
                widths.iter().all(|&w| w >= 1),
                "CNN widths must be positive"
            );
        }
        Ok(())
    }
}
