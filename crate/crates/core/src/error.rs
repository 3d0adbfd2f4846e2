use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Manifest or spec file does not conform to its schema.
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    /// A blob on disk disagrees with the shape its manifest declares.
    #[error("integrity error in tensor `{tensor}`: {message}")]
    Integrity { tensor: String, message: String },

    /// Quantized data breaks a structural invariant (code off-grid, bad scale).
    #[error("invariant violation in tensor `{tensor}`: {message}")]
    Invariant { tensor: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// Gram decomposition cannot produce strictly positive coefficients.
    #[error("degenerate gram matrix: entry ({row}, {col}) has magnitude {value}, so the channel coefficient cannot be positive")]
    DegenerateGram { row: usize, col: usize, value: f64 },

    /// Exhaustive search would exceed its size bound.
    #[error("brute-force search over {size} elements refused: limit is {limit} (3^{limit} assignments)")]
    SearchTooLarge { size: usize, limit: usize },

    #[error("i/o error on {}: {source}", path.display())]
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
