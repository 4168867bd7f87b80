use std::path::PathBuf;

use thiserror::Error;

use crate::policy::PolicyParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed arguments: out-of-vocabulary tokens, shape mismatches, empty inputs.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Hyperparameters or environment settings outside their valid range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("failed to load reward spec {path}: {reason}")]
    SpecLoad { path: PathBuf, reason: String },

    /// A gradient or parameter went non-finite during training. Carries the
    /// last finite parameters so the run can be inspected.
    #[error("non-finite {quantity} at step {step}")]
    NonFinite {
        step: usize,
        quantity: &'static str,
        snapshot: Box<PolicyParams>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
