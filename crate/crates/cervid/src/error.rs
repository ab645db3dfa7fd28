use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A precondition required finite values but the input had none at `row`
    /// (0-based trace row, i.e. time step `row + 1`).
    #[error("non-finite input in {context} at trace row {row}")]
    NonFinite { context: &'static str, row: usize },

    /// Sequential evaluation produced a non-finite state.
    #[error("dynamics diverged: first non-finite state at trace row {row}")]
    DivergedDynamics { row: usize },

    /// A matrix factorization or solve failed.
    #[error("numerical failure at trace row {row}: {message}")]
    Numerical { row: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
