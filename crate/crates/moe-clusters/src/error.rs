//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Errors are split by
//! contract: shape problems (`DimMismatch`), violated operation preconditions
//! (`Contract`), bad experiment configuration (`Config`, always naming the
//! offending key), and training divergence (`NonFiniteLoss`).

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: &'static str, detail: String },

    /// An operation precondition was violated (bad index set, empty candidate
    /// set, non-scalar backward root, ...).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A configuration value is out of range or inconsistent. `key` is the
    /// dotted path of the offending entry, e.g. `train.dropout_rate`.
    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    /// The training loss left the finite range; the payload is a diagnostic
    /// snapshot of the step that diverged.
    #[error(
        "non-finite loss at step {step}: task={task}, balance={balance}, \
         clustering={clustering}; aborting (check learning rate and init)"
    )]
    NonFiniteLoss {
        step: usize,
        task: f64,
        balance: f64,
        clustering: f64,
    },

    /// A checkpoint file failed to parse or round-trip.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying I/O failure (artifact writing, config reading).
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a [`Error::DimMismatch`].
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Shorthand for a [`Error::Contract`].
    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// Shorthand for a [`Error::Config`].
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }
}
