// SPDX-License-Identifier: MIT OR Apache-2.0

//! Side-effect-free diagnostics over forward traces.
//!
//! Layer numbers are 1-based throughout; layer `l` is the output of block
//! `l`. Layer-restricted summaries default to the interior `2..=L-1`.

mod attribution;
mod cosine;
pub mod export;
mod gate;
mod massive;
mod report;
mod scores;
mod sinks;
mod timeline;

pub use attribution::{component_attribution, AttributionReport, Component, ComponentMax, LayerAttribution, Origin};
pub use cosine::{cosine_to_bos, pairwise_cosine, CosineLayer, CosineReport};
pub use gate::{gate_projection_stats, gate_sign_features, GateStats};
pub use massive::{
    massive_activation_indices, massive_layer, theta_consistency, MassiveActivationReport, MassiveLayer,
    ThetaConsistency, DEFAULT_TAU, EPS_ABS,
};
pub use report::{
    analyze, analyze_trace, intervention_experiment, AnalysisOptions, InterventionOutcome, ReportDiff, SinkReport,
    ThetaChange, REPORT_SCHEMA_VERSION,
};
pub use scores::{attention_receive_scores, AttentionScoreMatrix};
pub use sinks::{classify_sinks, considered_layers, nearest_non_sink, SinkRule, SinkSet};
pub use timeline::{checkpoint_timeline, EmergenceSummary};
