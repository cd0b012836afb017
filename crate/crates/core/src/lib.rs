// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-sink laboratory.
//!
//! A small Llama-style decoder built on a hand-written reverse-mode tape,
//! instrumented to record every hidden state and attention map, together with
//! the diagnostics that locate attention sinks and massive activations, the
//! rotation interventions that probe them, and a training harness with a
//! BOS-decorrelation penalty on a synthetic audio-visual transcription task.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
