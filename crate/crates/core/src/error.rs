//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the named operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value failed validation.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("cannot normalize a zero-energy vector")]
    DegenerateInput,

    #[error("deep fade: |h| = {magnitude:e} is below the equalizer floor")]
    DeepFade { magnitude: f64 },

    /// A forward pass produced NaN or infinity; `op` is the first offending node.
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Parse(_))
    }
}
