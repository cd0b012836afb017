// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::model::{ForwardTrace, Role};

/// Attention received per layer and token, averaged over heads and over
/// the positions allowed to attend to the token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionScoreMatrix {
    /// `alpha[l - 1][i]` for 1-based layer `l`.
    pub alpha: Vec<Vec<f64>>,
    pub roles: Vec<Role>,
}

impl AttentionScoreMatrix {
    pub fn n_layers(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    /// Score of token `i` at 1-based layer `l`.
    pub fn get(&self, l: usize, i: usize) -> f64 {
        self.alpha[l - 1][i]
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.alpha[l - 1]
    }
}

/// `α[l][i] = Σ_h Σ_{k ≥ i} A_h^l[k, i] / (H · (N − i))` with 0-based `i`.
pub fn attention_receive_scores(trace: &ForwardTrace) -> AttentionScoreMatrix {
    let n = trace.n_tokens();
    let alpha = trace
        .layers
        .iter()
        .map(|layer| {
            let heads = layer.attention.len().max(1) as f64;
            let mut col = vec![0.0; n];
            for map in &layer.attention {
                for k in 0..n {
                    let row = map.row(k);
                    for (i, c) in col.iter_mut().enumerate().take(k + 1) {
                        *c += row[i];
                    }
                }
            }
            col.iter()
                .enumerate()
                .map(|(i, s)| s / (heads * (n - i) as f64))
                .collect()
        })
        .collect();
    AttentionScoreMatrix {
        alpha,
        roles: trace.roles.clone(),
    }
}
