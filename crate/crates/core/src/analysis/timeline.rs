// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::report::SinkReport;
use crate::error::{Error, Result};

/// When each token first became a global sink during training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergenceSummary {
    /// token → first step at which it is in the global sink set.
    pub emergence: BTreeMap<usize, usize>,
    /// BOS is a sink in the earliest snapshot.
    pub bos_from_start: bool,
}

/// Scans `(step, report)` snapshots, which must all describe the same sequence.
pub fn checkpoint_timeline(reports: &[(usize, SinkReport)]) -> Result<EmergenceSummary> {
    let mut ordered: Vec<&(usize, SinkReport)> = reports.iter().collect();
    ordered.sort_by_key(|(step, _)| *step);
    if let Some((_, first)) = ordered.first() {
        if let Some((step, _)) = ordered.iter().find(|(_, r)| r.sequence != first.sequence) {
            return Err(Error::contract(format!(
                "report at step {step} describes a different sequence"
            )));
        }
    }
    let mut emergence = BTreeMap::new();
    for (step, report) in &ordered {
        for &token in &report.sinks.global {
            emergence.entry(token).or_insert(*step);
        }
    }
    let bos_from_start = ordered.first().is_some_and(|(_, r)| r.sinks.contains_bos());
    Ok(EmergenceSummary {
        emergence,
        bos_from_start,
    })
}
