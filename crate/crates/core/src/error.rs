use thiserror::Error;

use crate::fit::QuadricForm;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Precondition,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("underdetermined system: need rank {needed}, achieved rank {achieved}")]
    Underdetermined { needed: usize, achieved: usize },
    #[error("singular {what} (condition number {condition:.3e})")]
    Singular { what: String, condition: f64 },
    #[error("not an ellipsoid: {0}")]
    NotEllipsoid(String),
    #[error("solver stopped after {iterations} iterations without converging (objective {objective:.6e})")]
    NoConvergence {
        iterations: usize,
        objective: f64,
        best: Option<Box<QuadricForm>>,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed input: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Precondition(_)
            | Error::Domain(_)
            | Error::DimensionMismatch { .. }
            | Error::TooFewSamples { .. } => ErrorKind::Precondition,
            Error::Underdetermined { .. }
            | Error::Singular { .. }
            | Error::NotEllipsoid(_)
            | Error::NoConvergence { .. }
            | Error::Numerical(_) => ErrorKind::Numerical,
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) | Error::Format(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
