// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report files: JSON documents and `layer,token,value` heatmap tables.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::cosine::CosineReport;
use super::scores::AttentionScoreMatrix;
use crate::error::{Error, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: "report",
        detail: e.to_string(),
    })?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "report",
        detail: format!("{}: {e}", path.display()),
    })
}

/// One heatmap cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub token: usize,
    pub value: f64,
}

pub fn alpha_heatmap(scores: &AttentionScoreMatrix) -> Vec<HeatmapRow> {
    scores
        .alpha
        .iter()
        .enumerate()
        .flat_map(|(k, row)| {
            row.iter().enumerate().map(move |(token, &value)| HeatmapRow {
                layer: k + 1,
                token,
                value,
            })
        })
        .collect()
}

pub fn cosine_heatmap(cosine: &CosineReport) -> Vec<HeatmapRow> {
    cosine
        .layers
        .iter()
        .flat_map(|l| {
            l.to_bos.iter().enumerate().map(move |(token, &value)| HeatmapRow {
                layer: l.layer,
                token,
                value,
            })
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        what: "heatmap",
        detail: format!("{}: {e}", path.display()),
    }
}

/// Writes rows with a `layer,token,value` header. Values use the shortest
/// decimal form that parses back to the same `f64`.
pub fn write_heatmap(path: &Path, rows: &[HeatmapRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_heatmap(path: &Path) -> Result<Vec<HeatmapRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}
