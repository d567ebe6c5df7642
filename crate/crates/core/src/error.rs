use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate similarity: {0}")]
    DegenerateSimilarity(String),

    #[error("memory budget of {budget} bytes is below the {required} byte floor ({what})")]
    BudgetTooSmall {
        what: &'static str,
        budget: u64,
        required: u64,
    },

    #[error("parameter key mismatch: {0}")]
    KeyMismatch(String),

    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),

    #[error("{path}:{line}: {msg}")]
    Dataset {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::BudgetTooSmall { .. } => 2,
            Error::NonFinite(_)
            | Error::Shape { .. }
            | Error::LabelOutOfRange { .. }
            | Error::DegenerateSimilarity(_)
            | Error::KeyMismatch(_) => 3,
            Error::Io { .. } | Error::Checkpoint(_) | Error::Dataset { .. } => 4,
        }
    }
}
