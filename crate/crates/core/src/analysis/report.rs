// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::attribution::{component_attribution, AttributionReport};
use super::cosine::{cosine_to_bos, CosineReport};
use super::massive::{
    massive_activation_indices, theta_consistency, MassiveActivationReport, ThetaConsistency, DEFAULT_TAU,
};
use super::scores::{attention_receive_scores, AttentionScoreMatrix};
use super::sinks::{classify_sinks, SinkRule, SinkSet};
use crate::error::Result;
use crate::model::{
    forward_with_trace, ForwardTrace, InterventionSpec, LoraSet, ModelInput, ModelParams, SequenceSpec,
};

/// Version of the serialized report layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Knobs shared by every diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub sinks: SinkRule,
    /// Run layer-restricted diagnostics over `1..=L` instead of the interior.
    #[serde(default)]
    pub full_range: bool,
    /// Include the `N × N` cosine matrix per layer.
    #[serde(default)]
    pub pairwise: bool,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            sinks: SinkRule::default(),
            full_range: false,
            pairwise: false,
        }
    }
}

/// Every diagnostic for one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub schema_version: u32,
    pub sequence: SequenceSpec,
    pub scores: AttentionScoreMatrix,
    pub sinks: SinkSet,
    pub massive: MassiveActivationReport,
    pub theta: Vec<ThetaConsistency>,
    pub cosine: CosineReport,
    pub attribution: AttributionReport,
}

pub fn analyze_trace(trace: &ForwardTrace, sequence: &SequenceSpec, options: &AnalysisOptions) -> Result<SinkReport> {
    let scores = attention_receive_scores(trace);
    let rule = SinkRule {
        full_range: options.full_range || options.sinks.full_range,
        ..options.sinks
    };
    let sinks = classify_sinks(&scores, rule)?;
    let massive = massive_activation_indices(trace, options.tau)?;
    let theta = theta_consistency(&massive, &sinks, rule.full_range);
    let cosine = cosine_to_bos(trace, options.pairwise);
    let attribution = component_attribution(trace, &sinks, options.tau);
    Ok(SinkReport {
        schema_version: REPORT_SCHEMA_VERSION,
        sequence: sequence.clone(),
        scores,
        sinks,
        massive,
        theta,
        cosine,
        attribution,
    })
}

/// Forward pass plus analysis.
pub fn analyze(
    params: &ModelParams,
    lora: Option<&LoraSet>,
    input: &ModelInput,
    options: &AnalysisOptions,
) -> Result<(ForwardTrace, SinkReport)> {
    let (_, trace) = forward_with_trace(params, lora, input, &[])?;
    let report = analyze_trace(&trace, &input.spec, options)?;
    Ok((trace, report))
}

/// Reports with and without one rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub spec: InterventionSpec,
    pub baseline: SinkReport,
    pub intervened: SinkReport,
}

pub fn intervention_experiment(
    params: &ModelParams,
    lora: Option<&LoraSet>,
    input: &ModelInput,
    spec: InterventionSpec,
    options: &AnalysisOptions,
) -> Result<InterventionOutcome> {
    let (_, base) = forward_with_trace(params, lora, input, &[])?;
    let (_, edited) = forward_with_trace(params, lora, input, &[spec])?;
    Ok(InterventionOutcome {
        spec,
        baseline: analyze_trace(&base, &input.spec, options)?,
        intervened: analyze_trace(&edited, &input.spec, options)?,
    })
}

/// One token's Θ set before and after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaChange {
    pub layer: usize,
    pub token: usize,
    pub before: BTreeSet<usize>,
    pub after: BTreeSet<usize>,
}

/// Differences between a baseline and an intervened report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDiff {
    /// `α_after − α_before` per layer and token.
    pub delta_alpha: Vec<Vec<f64>>,
    /// Cosine-to-BOS change per layer and token.
    pub delta_cosine: Vec<Vec<f64>>,
    pub theta_changes: Vec<ThetaChange>,
    pub sinks_added: BTreeSet<usize>,
    pub sinks_removed: BTreeSet<usize>,
}

impl ReportDiff {
    pub fn between(before: &SinkReport, after: &SinkReport) -> Self {
        let sub = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter()
                .zip(b)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| y - x).collect())
                .collect()
        };
        let cos = |r: &SinkReport| -> Vec<Vec<f64>> { r.cosine.layers.iter().map(|l| l.to_bos.clone()).collect() };
        let mut theta_changes = Vec::new();
        for (lb, la) in before.massive.layers.iter().zip(&after.massive.layers) {
            for (token, (tb, ta)) in lb.theta.iter().zip(&la.theta).enumerate() {
                if tb != ta {
                    theta_changes.push(ThetaChange {
                        layer: lb.layer,
                        token,
                        before: tb.clone(),
                        after: ta.clone(),
                    });
                }
            }
        }
        Self {
            delta_alpha: sub(&before.scores.alpha, &after.scores.alpha),
            delta_cosine: sub(&cos(before), &cos(after)),
            theta_changes,
            sinks_added: after.sinks.global.difference(&before.sinks.global).copied().collect(),
            sinks_removed: before.sinks.global.difference(&after.sinks.global).copied().collect(),
        }
    }

    /// No numeric or set change at all.
    pub fn is_empty(&self) -> bool {
        let zero = |m: &[Vec<f64>]| m.iter().flatten().all(|&v| v == 0.0);
        zero(&self.delta_alpha)
            && zero(&self.delta_cosine)
            && self.theta_changes.is_empty()
            && self.sinks_added.is_empty()
            && self.sinks_removed.is_empty()
    }
}
