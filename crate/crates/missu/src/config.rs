//! Architecture and optimization configuration records.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of encoder stages. The shape laws (channel doubling, spatial
/// halving) are written against this constant.
pub const STAGES: usize = 4;

/// Where multi-scale fusion outputs go.
///
/// - `Off`: no MSF blocks at all.
/// - `Local`: MSF runs in training only; the decoder consumes stem features,
///   so the whole block is dropped at inference.
/// - `MsOutput`: the decoder consumes MSF outputs; the block is part of the
///   inference graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsfMode {
    Off,
    Local,
    MsOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input modalities (4 for the multi-modal MRI setting, 2 for the
    /// two-modality liver setting).
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of stage 1; stage s has `base_channels * 2^(s-1)`.
    pub base_channels: usize,
    /// Token embedding width d.
    pub embed_dim: usize,
    /// Transformer depth L.
    pub num_layers: usize,
    pub num_heads: usize,
    /// FFN hidden width as a multiple of `embed_dim`.
    pub ffn_multiplier: usize,
    /// Global attention stage on top of the deepest features. The ablation
    /// grid's base rows disable it, leaving a plain convolutional UNet.
    pub use_transformer: bool,
    pub msf_mode: MsfMode,
    pub self_distill: bool,
    /// Weight of the self-distillation term in the joint loss.
    pub lambda_sd: f64,
    /// How many decoder skip connections are wired, counted from the
    /// deepest (stage 3) upward; 0..=3.
    pub num_skips: usize,
    /// Fixed (H, W, D); each divisible by 8. The positional table is sized
    /// for exactly this shape.
    pub input_shape: (usize, usize, usize),
}

impl ModelConfig {
    /// Channels at stage `s` (1-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << (s - 1)
    }

    /// Spatial dims at stage `s` (1-based).
    pub fn stage_shape(&self, s: usize) -> (usize, usize, usize) {
        let f = 1 << (s - 1);
        let (h, w, d) = self.input_shape;
        (h / f, w / f, d / f)
    }

    /// Token count M = (H/8)(W/8)(D/8).
    pub fn token_count(&self) -> usize {
        let (h, w, d) = self.stage_shape(STAGES);
        h * w * d
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.input_shape;
        let div = 1 << (STAGES - 1);
        if h == 0 || w == 0 || d == 0 || h % div != 0 || w % div != 0 || d % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "input shape {:?} must have every axis a positive multiple of {div}",
                self.input_shape
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.embed_dim < self.base_channels * 8 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be >= 8*base_channels = {}",
                self.embed_dim,
                self.base_channels * 8
            )));
        }
        if self.use_transformer {
            if self.num_layers == 0 {
                return Err(Error::InvalidConfig("num_layers must be >= 1".into()));
            }
            if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "embed_dim {} must be divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                )));
            }
            if self.ffn_multiplier == 0 {
                return Err(Error::InvalidConfig("ffn_multiplier must be >= 1".into()));
            }
        }
        if self.lambda_sd < 0.0 || !self.lambda_sd.is_finite() {
            return Err(Error::InvalidConfig("lambda_sd must be finite and >= 0".into()));
        }
        if self.num_skips > 3 {
            return Err(Error::InvalidConfig("num_skips must be in 0..=3".into()));
        }
        if self.msf_mode == MsfMode::Off && self.self_distill {
            return Err(Error::InvalidConfig(
                "self_distill requires msf_mode != off".into(),
            ));
        }
        Ok(())
    }

    /// Small configuration used throughout the test suite: full pipeline
    /// (transformer + MSF local + self-distillation) at 32^3.
    pub fn toy() -> Self {
        ModelConfig {
            in_channels: 2,
            num_classes: 4,
            base_channels: 4,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_multiplier: 4,
            use_transformer: true,
            msf_mode: MsfMode::Local,
            self_distill: true,
            lambda_sd: 0.3,
            num_skips: 3,
            input_shape: (32, 32, 32),
        }
    }
}

impl Default for ModelConfig {
    /// Full-scale defaults: 4 modalities at 128^3, base 16, d=512, L=4.
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            num_classes: 4,
            base_channels: 16,
            embed_dim: 512,
            num_layers: 4,
            num_heads: 8,
            ffn_multiplier: 4,
            use_transformer: true,
            msf_mode: MsfMode::Local,
            self_distill: true,
            lambda_sd: 0.3,
            num_skips: 3,
            input_shape: (128, 128, 128),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Poly schedule exponent.
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Maximum iterations T; the only stopping rule.
    pub max_iters: u64,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    /// Apply flip/intensity augmentation to each training batch.
    pub augment: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig("lr0 must be > 0".into()));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::InvalidConfig("poly_power must be > 0".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Desk-scale defaults: batch 2, 300 iterations.
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 2,
            max_iters: 300,
            ..TrainConfig::default()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 4e-4,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-5,
            batch_size: 4,
            max_iters: 1000,
            seed: 0,
            checkpoint_every: 0,
            augment: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::default().validate().unwrap();
        TrainConfig::toy().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = ModelConfig {
            input_shape: (30, 32, 32),
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_small_embed_dim() {
        let cfg = ModelConfig {
            embed_dim: 16,
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_distill_without_msf() {
        let cfg = ModelConfig {
            msf_mode: MsfMode::Off,
            self_distill: true,
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shape_laws() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.stage_channels(4), 128);
        assert_eq!(cfg.stage_shape(4), (16, 16, 16));
        assert_eq!(cfg.token_count(), 4096);
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = ModelConfig::toy();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }
}
