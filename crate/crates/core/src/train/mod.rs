// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy task, objective, optimizer and the two training phases.

mod loss;
mod optim;
mod run;
mod task;

pub use loss::{
    decorrelation_loss, decorrelation_on_tape, decorrelation_rows, edit_distance, sequence_cross_entropy,
    token_error_rate, total_loss, LossTerms,
};
pub use optim::AdamW;
pub use run::{
    held_out_set, init_model, run_finetune, run_pretrain, stream_rng, CheckpointMetrics, Evaluation, LrSchedule, Phase,
    RunMetrics, RunOptions, RunOutcome, RunSummary, TrainConfig,
};
pub use task::{generate_toy_batch, ToyTask, ToyTaskSpec};
