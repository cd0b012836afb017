// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::massive::EPS_ABS;
use super::sinks::SinkSet;
use crate::model::ForwardTrace;
use crate::tensor::{median, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Mhsa,
    Mlp,
}

/// Largest `|contribution|` over sink and over non-sink tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentMax {
    pub sink: f64,
    pub non_sink: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAttribution {
    pub layer: usize,
    pub mhsa: ComponentMax,
    pub mlp: ComponentMax,
    /// `max(τ · median|H^l|, EPS_ABS)`.
    pub threshold: f64,
}

/// First layer and component whose contribution to a sink token crosses the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub layer: usize,
    pub component: Component,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub tau: f64,
    pub layers: Vec<LayerAttribution>,
    /// Earliest layer where the MLP contribution to a sink exceeds the threshold.
    pub earliest_mlp_layer: Option<usize>,
    /// Earliest layer where either component does; the larger one is named.
    pub origin: Option<Origin>,
    /// Largest deviation of the residual reconstruction over all layers.
    pub reconstruction_error: f64,
}

fn split_max(t: &Tensor, sinks: &SinkSet) -> ComponentMax {
    let mut out = ComponentMax {
        sink: 0.0,
        non_sink: 0.0,
    };
    for i in 0..t.rows() {
        let m = t.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let slot = if sinks.is_sink(i) {
            &mut out.sink
        } else {
            &mut out.non_sink
        };
        *slot = slot.max(m);
    }
    out
}

pub fn component_attribution(trace: &ForwardTrace, sinks: &SinkSet, tau: f64) -> AttributionReport {
    let mut layers = Vec::with_capacity(trace.n_layers());
    let mut earliest_mlp_layer = None;
    let mut origin = None;
    for l in 1..=trace.n_layers() {
        let lt = trace.layer(l);
        let mags: Vec<f64> = lt.hidden.data().iter().map(|v| v.abs()).collect();
        let threshold = (tau * median(&mags)).max(EPS_ABS);
        let mhsa = split_max(&lt.attn_out, sinks);
        let mlp = split_max(&lt.mlp_out, sinks);
        if earliest_mlp_layer.is_none() && mlp.sink > threshold {
            earliest_mlp_layer = Some(l);
        }
        if origin.is_none() && (mlp.sink > threshold || mhsa.sink > threshold) {
            let component = if mlp.sink >= mhsa.sink {
                Component::Mlp
            } else {
                Component::Mhsa
            };
            origin = Some(Origin { layer: l, component });
        }
        layers.push(LayerAttribution {
            layer: l,
            mhsa,
            mlp,
            threshold,
        });
    }
    AttributionReport {
        tau,
        layers,
        earliest_mlp_layer,
        origin,
        reconstruction_error: trace.reconstruction_error(),
    }
}
