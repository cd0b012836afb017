// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization applied before attention and MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// RMS normalization with learned gain (Llama family).
    #[default]
    Rms,
    /// Mean-subtracting layer normalization with learned gain, for ablations.
    Layer,
}

/// Shape of the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Inner width of the gated MLP.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    /// Width of the raw audio feature stream fed to the audio projector.
    pub audio_dim: usize,
    /// Width of the raw video feature stream fed to the video projector.
    pub video_dim: usize,
    #[serde(default)]
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 28,
            max_seq: 192,
            rope_base: 10_000.0,
            audio_dim: 24,
            video_dim: 24,
            norm: NormKind::Rms,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Checks the structural invariants the forward pass relies on.
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(Error::contract("head width must be even for rotary encoding"));
        }
        if self.n_layers < 4 {
            return Err(Error::contract(format!(
                "n_layers = {} but at least 4 are needed for a non-empty interior layer range",
                self.n_layers
            )));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::contract("d_ff, vocab_size and max_seq must be positive"));
        }
        if self.audio_dim == 0 || self.video_dim == 0 {
            return Err(Error::contract("modality widths must be positive"));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::contract("rope_base must exceed 1"));
        }
        Ok(())
    }

    /// Interior layers `2..=L-1` (1-based), where massive activations are studied.
    pub fn interior_layers(&self) -> std::ops::RangeInclusive<usize> {
        2..=self.n_layers - 1
    }

    /// Number of scalar parameters of the base model (no adapters).
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 3 * d * self.d_ff + 2 * d;
        self.n_layers * per_layer + 2 * self.vocab_size * d + d + (self.audio_dim + self.video_dim) * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_shallow_models() {
        let mut c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.n_layers = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn interior_layers_exclude_first_and_last() {
        let c = ModelConfig {
            n_layers: 6,
            ..ModelConfig::default()
        };
        assert_eq!(c.interior_layers().collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    }
}
