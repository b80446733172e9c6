use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report.
///
/// The variants line up with the process exit codes of the command-line
/// front end (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 I/O or format, 4 divergence, 5 protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Label(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Training { .. } => 4,
            Error::Protocol(_) => 5,
            Error::Dimension { .. }
            | Error::Shape(_)
            | Error::Contract(_)
            | Error::Evaluation(_) => 1,
        }
    }
}
