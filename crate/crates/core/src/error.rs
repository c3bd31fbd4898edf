use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {op}")]
    InvalidShape { op: &'static str, shape: Vec<usize> },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op} requires a strictly positive input")]
    Domain { op: &'static str },

    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("backward called on a tensor that is not part of a recorded graph")]
    NoGraph,

    #[error("variable belongs to a different tape")]
    ForeignTape,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fixed-point inversion did not reach tolerance {tol} within {max_iter} iterations (residual {residual})")]
    InversionDiverged { tol: f64, max_iter: usize, residual: f64 },

    #[error("non-finite loss term `{term}` at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
