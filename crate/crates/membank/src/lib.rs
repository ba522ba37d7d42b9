//! Question answering over short stories with a growable hierarchy of
//! memory banks.
//!
//! A story is read one sentence at a time. Every word becomes an entity
//! carrying a hidden state and a question-relevance strength. Entities live
//! in an ordered list of banks: `m_0` holds everything ever seen, and the
//! model learns to copy question-relevant entities into later banks so that
//! answering can consult only a small tail of the hierarchy. The whole
//! pipeline (encoder GRUs, bank operations, decoder) runs on a reverse-mode
//! tape over dense `f64` tensors, so it trains end to end; the discrete
//! copy/grow decisions go through a straight-through Bernoulli node.
//!
//! Modules mirror the pipeline: [`autodiff`] (tape), [`encoder`] (word and
//! question GRUs plus the strength GRU), [`memory`] (banks, the semantic
//! graph and the four bank operations), [`decoder`] (bank-weighted answer
//! readout), [`loss`] (answer, strength and bank-growth losses), [`tasks`]
//! (story generation and the text corpus format), and [`harness`]
//! (training, evaluation, checkpoints, metrics).

pub mod autodiff;
pub mod decoder;
pub mod encoder;
pub mod gru;
pub mod harness;
pub mod loss;
pub mod memory;
pub mod model;
pub mod tasks;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("no entities to decode: all {0} consulted banks are empty")]
    EmptyDecode(usize),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("split error: {0}")]
    Split(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
