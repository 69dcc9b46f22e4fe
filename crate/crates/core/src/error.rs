use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operation received operands whose shapes do not fit together.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation was called with arguments that violate its contract.
    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    /// Checked mode detected a NaN or infinity in an operation result.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A patch plan does not match the model it is applied to.
    #[error("invalid patch plan: {0}")]
    Plan(String),

    /// Rejection sampling could not place the requested objects.
    #[error(
        "could not place {count} objects on a {grid_side}x{grid_side} grid \
         after {attempts} attempts"
    )]
    Placement {
        count: usize,
        grid_side: usize,
        attempts: usize,
    },

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
