use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A Gaussian transition with zero variance has no density.
    #[error("degenerate density ({context}): variance is {var}")]
    DegenerateDensity { context: String, var: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The closed-form gradient only holds where no group member is clipped.
    #[error("closed-form gradient inapplicable: {clipped} group member(s) clipped")]
    ClippingActive { clipped: usize },

    #[error("episode already finished")]
    EpisodeDone,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint does not match network: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
