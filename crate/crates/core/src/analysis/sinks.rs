// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use super::scores::AttentionScoreMatrix;
use crate::error::{Error, Result};
use crate::tensor::median;

/// Numeric sink rule: a token is a layer sink when its score reaches
/// `ratio` times the layer median, and a global sink when that holds in at
/// least `min_layers_frac` of the considered layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkRule {
    pub ratio: f64,
    pub min_layers_frac: f64,
    /// Consider layers `1..=L` instead of the interior `2..=L-1`.
    #[serde(default)]
    pub full_range: bool,
}

impl Default for SinkRule {
    fn default() -> Self {
        Self {
            ratio: 5.0,
            min_layers_frac: 0.5,
            full_range: false,
        }
    }
}

/// Layer range a diagnostic runs over (1-based, inclusive).
pub fn considered_layers(n_layers: usize, full_range: bool) -> RangeInclusive<usize> {
    if full_range || n_layers < 3 {
        1..=n_layers
    } else {
        2..=n_layers - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkSet {
    /// Sinks of each layer, index `l − 1`.
    pub per_layer: Vec<BTreeSet<usize>>,
    pub global: BTreeSet<usize>,
    pub rule: SinkRule,
}

impl SinkSet {
    pub fn is_sink(&self, token: usize) -> bool {
        self.global.contains(&token)
    }

    pub fn contains_bos(&self) -> bool {
        self.global.contains(&0)
    }
}

pub fn classify_sinks(scores: &AttentionScoreMatrix, rule: SinkRule) -> Result<SinkSet> {
    if !(rule.ratio > 1.0) {
        return Err(Error::contract(format!("sink ratio must exceed 1, got {}", rule.ratio)));
    }
    if !(rule.min_layers_frac > 0.0 && rule.min_layers_frac <= 1.0) {
        return Err(Error::contract(format!(
            "min_layers_frac must lie in (0, 1], got {}",
            rule.min_layers_frac
        )));
    }
    let per_layer: Vec<BTreeSet<usize>> = scores
        .alpha
        .iter()
        .map(|row| {
            let cut = rule.ratio * median(row);
            row.iter()
                .enumerate()
                .filter(|(_, &a)| a >= cut && a > 0.0)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let layers = considered_layers(scores.n_layers(), rule.full_range);
    let n_considered = layers.clone().count() as f64;
    let need = rule.min_layers_frac * n_considered;
    let global = (0..scores.n_tokens())
        .filter(|i| {
            let hits = layers.clone().filter(|&l| per_layer[l - 1].contains(i)).count() as f64;
            n_considered > 0.0 && hits >= need
        })
        .collect();
    Ok(SinkSet {
        per_layer,
        global,
        rule,
    })
}

/// Nearest position (by index) not in `sinks`, ties broken toward the lower index.
pub fn nearest_non_sink(token: usize, sinks: &BTreeSet<usize>, n_tokens: usize) -> Option<usize> {
    (1..n_tokens).find_map(|dist| {
        let below = token.checked_sub(dist).filter(|j| !sinks.contains(j));
        let above = Some(token + dist).filter(|j| *j < n_tokens && !sinks.contains(j));
        below.or(above)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Role;

    fn matrix(rows: Vec<Vec<f64>>) -> AttentionScoreMatrix {
        let n = rows[0].len();
        AttentionScoreMatrix {
            alpha: rows,
            roles: vec![Role::Prompt; n],
        }
    }

    #[test]
    fn uniform_scores_have_no_sinks() {
        let s = classify_sinks(&matrix(vec![vec![0.1; 12]; 4]), SinkRule::default()).unwrap();
        assert!(s.global.is_empty());
    }

    #[test]
    fn rejects_bad_rule() {
        let m = matrix(vec![vec![0.1; 3]; 4]);
        let rule = SinkRule {
            ratio: 1.0,
            ..SinkRule::default()
        };
        assert!(classify_sinks(&m, rule).is_err());
        let rule = SinkRule {
            min_layers_frac: 0.0,
            ..SinkRule::default()
        };
        assert!(classify_sinks(&m, rule).is_err());
    }

    #[test]
    fn single_spike_everywhere() {
        let mut row = vec![0.01; 16];
        row[7] = 1.0;
        let s = classify_sinks(&matrix(vec![row; 5]), SinkRule::default()).unwrap();
        assert_eq!(s.global, BTreeSet::from([7]));
        assert!(!s.contains_bos());
    }

    #[test]
    fn nearest_non_sink_prefers_lower_index() {
        let sinks = BTreeSet::from([0, 20, 21]);
        assert_eq!(nearest_non_sink(20, &sinks, 30), Some(19));
        assert_eq!(nearest_non_sink(21, &sinks, 30), Some(22));
        assert_eq!(nearest_non_sink(0, &sinks, 30), Some(1));
        assert_eq!(nearest_non_sink(0, &BTreeSet::from([0]), 1), None);
    }
}
