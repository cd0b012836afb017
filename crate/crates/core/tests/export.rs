// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{random_input, random_model};
use sinklab::analysis::export::{alpha_heatmap, cosine_heatmap, read_heatmap, read_json, write_heatmap, write_json};
use sinklab::analysis::{analyze, checkpoint_timeline, AnalysisOptions, SinkReport};
use sinklab::fixtures::planted_sink;

#[test]
fn report_json_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..8 {
        let params = random_model(seed, 6.0);
        let input = random_input(seed, seed % 2 == 0);
        let opts = AnalysisOptions {
            pairwise: true,
            ..AnalysisOptions::default()
        };
        let (_, report) = analyze(&params, None, &input, &opts).unwrap();
        let path = dir.path().join(format!("r{seed}.json"));
        write_json(&path, &report).unwrap();
        let back: SinkReport = read_json(&path).unwrap();
        assert_eq!(back, report);
    }
}

#[test]
fn heatmaps_have_one_row_per_cell_and_exact_values() {
    let dir = tempfile::tempdir().unwrap();
    let params = random_model(11, 6.0);
    let input = random_input(11, true);
    let (trace, report) = analyze(&params, None, &input, &AnalysisOptions::default()).unwrap();
    let rows = alpha_heatmap(&report.scores);
    assert_eq!(rows.len(), trace.n_layers() * trace.n_tokens());
    let path = dir.path().join("alpha.csv");
    write_heatmap(&path, &rows).unwrap();
    let back = read_heatmap(&path).unwrap();
    assert_eq!(back, rows);
    for r in &back {
        assert_eq!(r.value.to_bits(), report.scores.get(r.layer, r.token).to_bits());
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("layer,token,value\n"));
    assert_eq!(cosine_heatmap(&report.cosine).len(), rows.len());
}

#[test]
fn timeline_records_first_appearance() {
    let (params, input, fx) = planted_sink().unwrap();
    let (_, planted) = analyze(&params, None, &input, &AnalysisOptions::default()).unwrap();
    let mut early = planted.clone();
    early.sinks.global.remove(&fx.sink);
    let summary = checkpoint_timeline(&[(200, planted.clone()), (0, early), (100, planted.clone())]).unwrap();
    assert!(summary.bos_from_start);
    assert_eq!(summary.emergence.get(&0), Some(&0));
    assert_eq!(summary.emergence.get(&fx.sink), Some(&100));

    let other = random_input(3, true);
    let (_, mismatched) = analyze(&common::random_model(3, 2.0), None, &other, &AnalysisOptions::default()).unwrap();
    assert!(checkpoint_timeline(&[(0, planted), (1, mismatched)]).is_err());
}
