// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::model::ForwardTrace;
use crate::tensor::{cosine, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineLayer {
    pub layer: usize,
    /// `cos(H^l[i], H^l[0])` for every token `i`.
    pub to_bos: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairwise: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    /// Layers `1..=L`.
    pub layers: Vec<CosineLayer>,
}

impl CosineReport {
    pub fn layer(&self, l: usize) -> &CosineLayer {
        &self.layers[l - 1]
    }
}

/// Full `N × N` cosine matrix of the rows of `h`.
pub fn pairwise_cosine(h: &Tensor) -> Vec<Vec<f64>> {
    let n = h.rows();
    (0..n)
        .map(|i| (0..n).map(|j| cosine(h.row(i), h.row(j))).collect())
        .collect()
}

/// Cosine of every token with BOS at each layer; zero-norm rows give 0.
pub fn cosine_to_bos(trace: &ForwardTrace, pairwise: bool) -> CosineReport {
    let layers = (1..=trace.n_layers())
        .map(|l| {
            let h = trace.hidden(l);
            CosineLayer {
                layer: l,
                to_bos: (0..h.rows()).map(|i| cosine(h.row(i), h.row(0))).collect(),
                pairwise: pairwise.then(|| pairwise_cosine(h)),
            }
        })
        .collect();
    CosineReport { layers }
}
