// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised by the tensor engine, the model, analysis and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    #[error("shape mismatch in {op}: {detail}")]
    Shape {
        /// Operation that rejected its inputs.
        op: &'static str,
        /// Human-readable description of the offending shapes.
        detail: String,
    },

    /// An index (token id, row, target class) is out of range.
    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        /// What was being indexed.
        what: &'static str,
        /// The offending index.
        index: usize,
        /// Valid length.
        len: usize,
    },

    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence {
        /// Optimizer step at which the loss went non-finite.
        step: usize,
        /// Which loss term failed.
        detail: String,
    },

    /// Malformed checkpoint or report content.
    #[error("malformed {what}: {detail}")]
    Format {
        /// Kind of document.
        what: &'static str,
        /// Parser message.
        detail: String,
    },

    /// Filesystem failure with the path that caused it.
    #[error("I/O error on {path}")]
    Io {
        /// Path being read or written.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
