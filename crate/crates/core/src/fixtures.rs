// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built models with known sink structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{LayerWeight, ModelConfig, ModelInput, ModelParams, ParamId, Role, SequenceSpec, Vocab};

/// Positions and constants of [`planted_sink`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedSink {
    /// Non-BOS token carrying the same massive feature as BOS.
    pub sink: usize,
    /// Nearest ordinary token to `sink` (lower index on ties).
    pub neighbour: usize,
    /// Ordinary token whose entries are all large but below threshold.
    pub loud: usize,
    pub spike_feature: usize,
    pub spike: f64,
    pub loud_level: f64,
}

/// A 4-layer model whose blocks leave the residual stream unchanged
/// (`W_O = W_down = 0`) and whose attention routes every ordinary query to
/// keys carrying the spike feature.
///
/// Ordinary rows have `±1` entries except a 0 at `spike_feature`, so the
/// layer median magnitude is 1. BOS and the planted sink carry `spike` at
/// feature 0 and at `spike_feature`; with `τ = 10³` those two features are
/// massive for exactly those two tokens.
pub fn planted_sink() -> Result<(ModelParams, ModelInput, PlantedSink)> {
    let config = ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 24,
        max_seq: 32,
        rope_base: 10_000.0,
        audio_dim: 4,
        video_dim: 4,
        ..ModelConfig::default()
    };
    let fixture = PlantedSink {
        sink: 3,
        neighbour: 2,
        loud: 6,
        spike_feature: 5,
        spike: 1500.0,
        loud_level: 600.0,
    };
    let n_tokens = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(&config, &mut rng)?;
    let d = config.d_model;

    // Row for each sequence position; position p > 0 uses token id 6 + p.
    let mut sign = || if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    for p in 0..n_tokens {
        let id = if p == 0 { Vocab::BOS } else { 6 + p };
        let mut row: Vec<f64> = (0..d).map(|_| sign()).collect();
        row[0] = 1.0;
        row[fixture.spike_feature] = 0.0;
        if p == 0 || p == fixture.sink {
            row[0] = fixture.spike;
            row[fixture.spike_feature] = fixture.spike;
        } else if p == fixture.loud {
            for v in &mut row {
                *v *= fixture.loud_level;
            }
        }
        params.embedding.row_mut(id).copy_from_slice(&row);
    }

    // Query reads the constant feature 0, key reads the spike feature, both
    // into the slowest rotary pair of each head so position barely matters.
    let dh = config.d_head();
    let slot = dh / 2 - 1;
    let gain = 3.0;
    for l in 1..=config.n_layers {
        for w in [LayerWeight::Wq, LayerWeight::Wk, LayerWeight::Wo, LayerWeight::Wdown] {
            params.get_mut(ParamId::Layer(l, w))?.data_mut().fill(0.0);
        }
        for h in 0..config.n_heads {
            params
                .get_mut(ParamId::Layer(l, LayerWeight::Wq))?
                .set(0, h * dh + slot, gain);
            params
                .get_mut(ParamId::Layer(l, LayerWeight::Wk))?
                .set(fixture.spike_feature, h * dh + slot, gain);
        }
    }

    let mut tokens = vec![Some(Vocab::BOS)];
    let mut roles = vec![Role::Bos];
    for p in 1..n_tokens {
        tokens.push(Some(6 + p));
        roles.push(Role::Prompt);
    }
    let input = ModelInput::text(SequenceSpec { tokens, roles })?;
    Ok((params, input, fixture))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{analyze, AnalysisOptions};

    #[test]
    fn planted_token_is_a_sink_with_the_bos_feature() {
        let (params, input, fx) = planted_sink().unwrap();
        let (trace, report) = analyze(&params, None, &input, &AnalysisOptions::default()).unwrap();
        assert_eq!(
            report.sinks.global.iter().copied().collect::<Vec<_>>(),
            vec![0, fx.sink]
        );
        for l in 1..=4 {
            assert_eq!(trace.hidden(l), trace.hidden(0));
            for (i, theta) in report.massive.layer(l).theta.iter().enumerate() {
                let want = if i == 0 || i == fx.sink {
                    vec![0, fx.spike_feature]
                } else {
                    vec![]
                };
                assert_eq!(theta.iter().copied().collect::<Vec<_>>(), want, "layer {l} token {i}");
            }
        }
    }
}
