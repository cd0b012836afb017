// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::sinks::{considered_layers, SinkSet};
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::{median, Tensor};

/// Default magnitude ratio over the layer median.
pub const DEFAULT_TAU: f64 = 1e3;

/// Absolute floor on the threshold so an all-zero layer flags nothing.
pub const EPS_ABS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassiveLayer {
    pub layer: usize,
    /// Median of `|H^l|` over all tokens and features.
    pub median: f64,
    /// `max(τ · median, EPS_ABS)`.
    pub threshold: f64,
    /// Feature set per token.
    pub theta: Vec<BTreeSet<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassiveActivationReport {
    pub tau: f64,
    /// Layers `1..=L` in order.
    pub layers: Vec<MassiveLayer>,
}

impl MassiveActivationReport {
    pub fn layer(&self, l: usize) -> &MassiveLayer {
        &self.layers[l - 1]
    }

    pub fn theta(&self, l: usize, token: usize) -> &BTreeSet<usize> {
        &self.layer(l).theta[token]
    }
}

/// Threshold a hidden-state matrix against `τ ×` its median magnitude.
pub fn massive_layer(hidden: &Tensor, layer: usize, tau: f64) -> MassiveLayer {
    let mags: Vec<f64> = hidden.data().iter().map(|v| v.abs()).collect();
    let med = median(&mags);
    let threshold = (tau * med).max(EPS_ABS);
    let theta = (0..hidden.rows())
        .map(|i| {
            hidden
                .row(i)
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() >= threshold)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    MassiveLayer {
        layer,
        median: med,
        threshold,
        theta,
    }
}

pub fn massive_activation_indices(trace: &ForwardTrace, tau: f64) -> Result<MassiveActivationReport> {
    if !(tau > 1.0) {
        return Err(Error::contract(format!("tau must exceed 1, got {tau}")));
    }
    let layers = (1..=trace.n_layers())
        .map(|l| massive_layer(trace.hidden(l), l, tau))
        .collect();
    Ok(MassiveActivationReport { tau, layers })
}

/// Whether the sink tokens of one layer share a single feature set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaConsistency {
    pub layer: usize,
    /// Every sink token has the same set.
    pub shared: bool,
    /// That common set, when `shared`.
    pub shared_set: Option<BTreeSet<usize>>,
    /// Every non-sink token has an empty set.
    pub non_sink_empty: bool,
}

pub fn theta_consistency(report: &MassiveActivationReport, sinks: &SinkSet, full_range: bool) -> Vec<ThetaConsistency> {
    considered_layers(report.layers.len(), full_range)
        .map(|l| {
            let layer = report.layer(l);
            let mut sink_sets = sinks.global.iter().filter_map(|&i| layer.theta.get(i));
            let first = sink_sets.next();
            let shared = match first {
                Some(f) => sink_sets.all(|s| s == f),
                None => true,
            };
            let shared_set = shared.then(|| first.cloned().unwrap_or_default());
            let non_sink_empty = layer
                .theta
                .iter()
                .enumerate()
                .filter(|(i, _)| !sinks.is_sink(*i))
                .all(|(_, s)| s.is_empty());
            ThetaConsistency {
                layer: l,
                shared,
                shared_set,
                non_sink_empty,
            }
        })
        .collect()
}
