//! Slot filling as natural-language response generation.
//!
//! A user utterance plus a slot key is rewritten into a dialog context
//! ending in a partial response ("Ok, the time is"), and a small causal
//! transformer completes it with either the slot value or the phrase
//! "not provided". A copy head lets the model emit utterance tokens
//! directly, constrained decoding restricts generation to utterance
//! tokens, and an edit-distance post-processor snaps near-miss outputs
//! back onto utterance spans.
//!
//! Modules follow the experiment lifecycle: [`corpus`] (data model and
//! synthetic generation), [`templating`] (context/target rendering),
//! [`tokenizer`] (byte-level BPE with character offsets), [`model`]
//! (transformer + gradients), [`copy`] (copy head), [`decoding`],
//! [`postprocess`] (span recovery), [`training`], [`eval`].

pub mod copy;
pub mod corpus;
pub mod decoding;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod postprocess;
pub mod rng;
pub mod templating;
pub mod tokenizer;
pub mod training;

use thiserror::Error;

/// Crate-wide error type. The variant name doubles as the machine-readable
/// category the CLI prints (`error[validation]: ...`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short category tag for exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Tokenizer(_) => "tokenizer",
            Error::Model(_) => "model",
            Error::Decode(_) => "decode",
            Error::Diverged(_) => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
