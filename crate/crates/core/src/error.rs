// SPDX-License-Identifier: Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum LitError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },

    #[error("index {index} out of range for size {bound} in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("loss mask selects no positions")]
    DegenerateMask,

    #[error("span {start}..{end} out of range for sequence of length {len}")]
    Span { start: usize, end: usize, len: usize },

    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    Layer { layer: usize, n_layers: usize },

    #[error("hidden size mismatch: activation has {got}, model expects {expected}")]
    HiddenSize { got: usize, expected: usize },

    #[error("patch and capture overlap at layer {layer}; capture precedence is undefined")]
    Precedence { layer: usize },

    #[error("context overflow: {len} tokens exceed the {max}-token context")]
    ContextOverflow { len: usize, max: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("requested {requested} {category} controls but the template capacity is {max}")]
    Capacity {
        category: String,
        requested: usize,
        max: usize,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: schema violation: {msg}")]
    Schema { line: usize, msg: String },

    #[error("word {0:?} is not in the vocabulary")]
    OutOfVocab(String),

    #[error("non-finite loss at step {step} (datums {datums:?})")]
    NonFinite { step: usize, datums: Vec<String> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{hint}` first")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("report type mismatch: {left} vs {right}")]
    ReportMismatch { left: String, right: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LitError> = std::result::Result<T, E>;
