// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;

use sinklab::model::{forward, text_sequence, Checkpoint, ModelConfig, Rates};
use sinklab::train::{
    held_out_set, init_model, run_finetune, run_pretrain, sequence_cross_entropy, Phase, RunOptions, ToyTaskSpec,
    TrainConfig,
};
use sinklab::{Error, Tape};

fn pretrain_cfg() -> TrainConfig {
    TrainConfig::pretrain_default()
}

fn short_finetune(lambda: f64, rates: Rates, steps: usize) -> TrainConfig {
    TrainConfig {
        lambda,
        rates,
        steps,
        checkpoint_interval: steps.max(1),
        eval_size: 4,
        ..TrainConfig::default()
    }
}

fn quick_base() -> Checkpoint {
    let cfg = TrainConfig {
        steps: 20,
        checkpoint_interval: 20,
        eval_size: 4,
        ..pretrain_cfg()
    };
    run_pretrain(
        &cfg,
        &ToyTaskSpec::default(),
        init_model(&ModelConfig::default(), 0).unwrap(),
        &RunOptions::default(),
    )
    .unwrap()
    .checkpoint
}

#[test]
fn pretraining_learns_the_walks_and_reloads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let toy = ToyTaskSpec::default();
    let model_cfg = ModelConfig::default();
    let cfg = pretrain_cfg();
    let out = run_pretrain(
        &cfg,
        &toy,
        init_model(&model_cfg, cfg.seed).unwrap(),
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let first = &out.metrics.checkpoints[0];
    let last = out.metrics.last().unwrap();
    let ln_v = (model_cfg.vocab_size as f64).ln();
    assert!((first.eval_ce - ln_v).abs() < 0.1, "{} vs ln V = {ln_v}", first.eval_ce);
    assert!(
        last.eval_ce <= 0.7 * first.eval_ce,
        "{} -> {}",
        first.eval_ce,
        last.eval_ce
    );
    assert!(last.eval_ter.is_none());

    // Held-out CE recomputed from the reloaded final checkpoint.
    let ckpt = Checkpoint::load(&dir.path().join(&out.summary.final_checkpoint)).unwrap();
    assert_eq!(ckpt.step, cfg.steps);
    let mut total = 0.0;
    let eval = held_out_set(&toy, cfg.seed, cfg.eval_size).unwrap();
    for s in &eval {
        let input = text_sequence(&s.transcript, &toy.vocab(), true).unwrap();
        let logits = forward(&ckpt.params, None, &input).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let ce = sequence_cross_entropy(&mut tape, l, &input.spec).unwrap();
        total += tape.value(ce).item();
    }
    assert_eq!(total / eval.len() as f64, last.eval_ce);

    for step in (0..=cfg.steps).step_by(cfg.checkpoint_interval) {
        assert!(dir.path().join(format!("checkpoints/step-{step:06}.ckpt")).is_file());
        assert!(dir.path().join(format!("metrics/step-{step:06}.json")).is_file());
    }
    assert!(dir.path().join("summary.json").is_file());
}

#[test]
fn paired_runs_share_the_first_step() {
    let base = quick_base();
    let toy = ToyTaskSpec::default();
    let runs: Vec<_> = [0.0, 100.0]
        .into_iter()
        .map(|l| {
            let cfg = TrainConfig {
                checkpoint_interval: 1,
                ..short_finetune(l, Rates::avsr(16, 5), 2)
            };
            run_finetune(&cfg, &toy, &base, &RunOptions::default()).unwrap().metrics
        })
        .collect();
    assert_eq!(runs[0].checkpoints[0], runs[1].checkpoints[0]);
    assert_eq!(runs[0].checkpoints[1].train_ce, runs[1].checkpoints[1].train_ce);
    assert_eq!(runs[0].checkpoints[1].train_decor, runs[1].checkpoints[1].train_decor);
    assert_ne!(runs[0].checkpoints[2].train_ce, runs[1].checkpoints[2].train_ce);
}

#[test]
fn finetune_freezes_the_base_model() {
    let base = quick_base();
    let out = run_finetune(
        &short_finetune(100.0, Rates::avsr(16, 5), 3),
        &ToyTaskSpec::default(),
        &base,
        &RunOptions::default(),
    )
    .unwrap();
    let tuned = &out.checkpoint.params;
    assert_eq!(tuned.embedding, base.params.embedding);
    assert_eq!(tuned.head, base.params.head);
    assert_eq!(tuned.layers, base.params.layers);
    assert_ne!(tuned.audio_proj, base.params.audio_proj);
    assert_ne!(tuned.video_proj, base.params.video_proj);
    let lora = out.checkpoint.lora.unwrap();
    assert_eq!(lora.adapters.len(), 16);
    assert!(lora.adapters.iter().all(|a| a.b.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn compression_grid_runs_to_completion() {
    let base = quick_base();
    for rates in [Rates::avsr(1, 1), Rates::avsr(4, 2), Rates::avsr(16, 5)] {
        let out = run_finetune(
            &short_finetune(100.0, rates, 2),
            &ToyTaskSpec::default(),
            &base,
            &RunOptions::default(),
        )
        .unwrap();
        let report = &out.metrics.last().unwrap().report;
        assert_eq!(report.scores.n_layers(), 4);
        assert!(out.summary.eval_ter.is_some());
    }
}

#[test]
fn identical_config_and_seed_give_identical_files() {
    let base = quick_base();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let opts = RunOptions {
            out_dir: Some(d.path().to_path_buf()),
            ..RunOptions::default()
        };
        run_finetune(
            &short_finetune(10.0, Rates::avsr(4, 2), 3),
            &ToyTaskSpec::default(),
            &base,
            &opts,
        )
        .unwrap();
    }
    for rel in [
        "summary.json",
        "metrics/step-000000.json",
        "metrics/step-000003.json",
        "checkpoints/step-000003.ckpt",
    ] {
        let a = fs::read(dirs[0].path().join(rel)).unwrap();
        let b = fs::read(dirs[1].path().join(rel)).unwrap();
        assert!(a == b, "{rel} differs");
    }
}

#[test]
fn divergence_aborts_with_the_step() {
    let cfg = TrainConfig {
        lr: 1e300,
        steps: 5,
        checkpoint_interval: 5,
        eval_size: 2,
        ..pretrain_cfg()
    };
    let err = run_pretrain(
        &cfg,
        &ToyTaskSpec::default(),
        init_model(&ModelConfig::default(), 0).unwrap(),
        &RunOptions::default(),
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn phase_and_config_preconditions() {
    let model = init_model(&ModelConfig::default(), 0).unwrap();
    let toy = ToyTaskSpec::default();
    assert!(run_pretrain(&TrainConfig::default(), &toy, model.clone(), &RunOptions::default()).is_err());
    let base = Checkpoint {
        params: model,
        lora: None,
        seed: 0,
        step: 0,
    };
    assert!(run_finetune(&pretrain_cfg(), &toy, &base, &RunOptions::default()).is_err());
    let bad = TrainConfig {
        lambda: -1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let asr_with_video = TrainConfig {
        rates: Rates {
            audio: Some(4),
            video: Some(0),
        },
        ..TrainConfig::default()
    };
    assert!(asr_with_video.validate().is_err());
    assert_eq!(TrainConfig::default().phase, Phase::Finetune);
}
