// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the lab's modules.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or inputs that violate a documented precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two shapes that must agree did not.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An index (layer, feature, neuron, column, template) was out of range.
    #[error("{what} index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A computation had nothing to operate on.
    #[error("empty input: {0}")]
    Empty(String),

    /// A statistic is undefined for the given data (e.g. constant series).
    #[error("undefined statistic: {0}")]
    Undefined(String),

    /// A random pool ran out of distinct values.
    #[error("pool exhausted: {0}")]
    Exhausted(String),

    /// Malformed checkpoint or data file.
    #[error("format error: {0}")]
    Format(String),

    /// Interpreter transport failure (network, timeout) after retries.
    #[error("transport error: {0}")]
    Transport(String),

    /// Interpreter returned a response that could not be parsed.
    #[error("protocol error: {message} (payload: {payload})")]
    Protocol { message: String, payload: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
