use thiserror::Error;

use crate::dataset::ClassId;

pub type Result<T> = std::result::Result<T, GlapError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlapError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {context} at row {row}, column {col}")]
    NonFinite {
        context: String,
        row: usize,
        col: usize,
    },

    #[error("{file}, line {line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("{0}")]
    Io(String),

    #[error("seen class {0} has no training instances")]
    EmptyClass(ClassId),

    #[error("unknown class id {0}")]
    UnknownClass(ClassId),

    #[error("singular system: {size}x{size} matrix has numerical rank {rank}")]
    Singular { rank: usize, size: usize },

    #[error("coordinate descent did not converge after {sweeps} sweeps (KKT violation {violation:e})")]
    NonConvergence { sweeps: usize, violation: f64 },
}

impl GlapError {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        GlapError::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    /// True for failures of the numerical kernels rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GlapError::Singular { .. } | GlapError::NonConvergence { .. }
        )
    }
}
