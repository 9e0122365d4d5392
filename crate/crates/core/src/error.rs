use thiserror::Error;

use crate::correct::CorrectionOutcome;

pub type Result<T> = std::result::Result<T, OrthoError>;

#[derive(Debug, Error)]
pub enum OrthoError {
    /// A pivoted-QR diagonal fell below the relative rank tolerance.
    /// `column` is the index of the offending column in the caller's matrix.
    #[error("matrix is rank deficient (column {column} is linearly dependent on the others)")]
    RankDeficient { column: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("value outside the family domain: {0}")]
    Domain(String),

    #[error("fit did not converge after {iterations} iterations")]
    DidNotConverge { iterations: usize },

    /// MDMM ran out of iterations; the best iterate seen is attached.
    #[error("constrained fit did not converge after {} iterations (constraint residual {:.3e})", .0.iterations, .0.constraint_residual)]
    ConstrainedDidNotConverge(Box<CorrectionOutcome>),

    #[error("information matrix is numerically singular")]
    SingularInformation,

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
}

impl OrthoError {
    pub(crate) fn dims(what: &'static str, expected: usize, found: usize) -> Self {
        OrthoError::DimensionMismatch {
            what,
            expected,
            found,
        }
    }
}
