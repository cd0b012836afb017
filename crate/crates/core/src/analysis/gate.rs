// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{apply_lora, ForwardTrace, LayerWeight, LoraSet, ModelParams, NormKind};
use crate::tensor::Tensor;

/// Sign pattern of the gate pre-activation `h · W_gate` at one MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub layer: usize,
    /// Per inner feature, the minimum over sink tokens (`+∞` with no sinks).
    pub sink_min: Vec<f64>,
    /// Per inner feature, the maximum over non-sink tokens (`−∞` with none).
    pub non_sink_max: Vec<f64>,
    /// Features with `sink_min > 0 > non_sink_max`.
    pub features: BTreeSet<usize>,
}

/// Scans a gate pre-activation matrix (`N × d_ff`) for features positive on
/// every sink token and negative on every other token.
pub fn gate_sign_features(gate: &Tensor, sinks: &BTreeSet<usize>, layer: usize) -> GateStats {
    let f = gate.cols();
    let mut sink_min = vec![f64::INFINITY; f];
    let mut non_sink_max = vec![f64::NEG_INFINITY; f];
    for i in 0..gate.rows() {
        let row = gate.row(i);
        if sinks.contains(&i) {
            for (m, v) in sink_min.iter_mut().zip(row) {
                *m = m.min(*v);
            }
        } else {
            for (m, v) in non_sink_max.iter_mut().zip(row) {
                *m = m.max(*v);
            }
        }
    }
    let features = if sinks.is_empty() {
        BTreeSet::new()
    } else {
        (0..f).filter(|&j| sink_min[j] > 0.0 && non_sink_max[j] < 0.0).collect()
    };
    GateStats {
        layer,
        sink_min,
        non_sink_max,
        features,
    }
}

/// Recomputes the MLP input of block `layer` from the trace and reports
/// the gate sign pattern against `sinks`.
pub fn gate_projection_stats(
    trace: &ForwardTrace,
    params: &ModelParams,
    lora: Option<&LoraSet>,
    layer: usize,
    sinks: &BTreeSet<usize>,
) -> Result<GateStats> {
    if !(1..=trace.n_layers()).contains(&layer) {
        return Err(Error::contract(format!(
            "layer {layer} outside 1..={}",
            trace.n_layers()
        )));
    }
    let merged;
    let params = match lora {
        Some(set) => {
            merged = apply_lora(params, set)?;
            &merged
        }
        None => params,
    };
    let lp = params.layer(layer)?;
    let mut tape = Tape::new();
    let prev = tape.constant(trace.hidden(layer - 1).clone());
    let o = tape.constant(trace.layer(layer).attn_out.clone());
    let r = tape.add(prev, o)?;
    let gain = tape.constant(lp.get(LayerWeight::MlpNorm).clone());
    let x = match params.config.norm {
        NormKind::Rms => tape.rms_norm(r, gain)?,
        NormKind::Layer => tape.layer_norm(r, gain)?,
    };
    let w = tape.constant(lp.get(LayerWeight::Wgate).clone());
    let gate = tape.matmul(x, w)?;
    Ok(gate_sign_features(tape.value(gate), sinks, layer))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_sign_pattern() {
        let n = 6;
        let f = 12;
        let sinks = BTreeSet::from([0, 4]);
        let mut gate = Tensor::filled(&[n, f], 0.3);
        for i in 0..n {
            for j in [3, 9] {
                gate.set(
                    i,
                    j,
                    if sinks.contains(&i) {
                        2.0 + i as f64
                    } else {
                        -1.0 - i as f64
                    },
                );
            }
        }
        let stats = gate_sign_features(&gate, &sinks, 2);
        assert_eq!(stats.features, BTreeSet::from([3, 9]));
        assert_eq!(stats.sink_min[3], 2.0);
        assert_eq!(stats.non_sink_max[9], -2.0);
    }

    #[test]
    fn absent_pattern_gives_empty_set() {
        let gate = Tensor::filled(&[4, 5], 1.0);
        assert!(gate_sign_features(&gate, &BTreeSet::from([0]), 1).features.is_empty());
        assert!(gate_sign_features(&gate, &BTreeSet::new(), 1).features.is_empty());
    }
}
