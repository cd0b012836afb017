// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinklab::model::{build_sequence, text_sequence, ModelConfig, ModelInput, ModelParams, Rates, Task, Vocab};
use sinklab::train::ToyTask;
use sinklab::train::ToyTaskSpec;

/// d = 16, H = 2, L = 4, d_ff = 32.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 16,
        max_seq: 24,
        rope_base: 10_000.0,
        audio_dim: 6,
        video_dim: 6,
        ..ModelConfig::default()
    }
}

pub fn tiny_toy() -> ToyTaskSpec {
    ToyTaskSpec {
        n_symbols: 6,
        prompt_len: 2,
        min_len: 2,
        max_len: 4,
        audio_factor: 2,
        audio_dim: 6,
        video_factor: 1,
        video_dim: 6,
        ..ToyTaskSpec::default()
    }
}

/// Random weights scaled up from the init so attention is far from uniform.
pub fn random_model(seed: u64, scale: f64) -> ModelParams {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
    for id in params.ids() {
        for v in params.get_mut(id).unwrap().data_mut() {
            *v = *v * scale + rng.random_range(-0.05..0.05);
        }
    }
    params
}

/// A text or multimodal input of the tiny toy task.
pub fn random_input(seed: u64, multimodal: bool) -> ModelInput {
    let toy = tiny_toy();
    let task = ToyTask::new(&toy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = task.batch(1, &mut rng).unwrap().remove(0);
    let vocab: Vocab = toy.vocab();
    if multimodal {
        build_sequence(
            &sample,
            Task::Avsr,
            Rates::avsr(2, 1),
            &vocab,
            true,
            tiny_config().max_seq,
        )
        .unwrap()
    } else {
        text_sequence(&sample.transcript, &vocab, true).unwrap()
    }
}
