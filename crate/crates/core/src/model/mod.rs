// SPDX-License-Identifier: MIT OR Apache-2.0

//! The instrumented Llama-style decoder.

mod checkpoint;
mod config;
mod forward;
mod generate;
mod lora;
mod params;
mod sequence;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, NormKind};
pub use forward::{
    bind, bind_frozen, embed_input, forward, forward_on_tape, forward_with_trace, glu_mlp, mhsa, BoundLayer,
    BoundModel, ForwardTrace, InterventionSpec, LayerTrace, RotationMode, TapeForward,
};
pub use generate::generate_greedy;
pub use lora::{apply_lora, LoraAdapter, LoraSet};
pub use params::{LayerParams, LayerWeight, ModelParams, ParamId, INIT_STD};
pub use sequence::{
    average_pool_compress, build_sequence, text_sequence, ModelInput, Rates, Role, Sample, SequenceSpec, Task, Vocab,
};
