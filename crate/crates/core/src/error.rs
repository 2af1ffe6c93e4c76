use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {id} out of range (bound {bound})")]
    Index { id: usize, bound: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("representation {index} has zero norm")]
    DegenerateRepresentation { index: usize },

    #[error("negative sampling exhausted: user clicked all {num_items} items")]
    Exhausted { num_items: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 2 config, 3 checkpoint, 4 data, 5 numeric; anything else that
    /// escapes to the top level is reported as 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Checkpoint(_) => 3,
            Error::Data(_) | Error::Parse { .. } | Error::Exhausted { .. } | Error::Io { .. } => 4,
            Error::Numeric(_) | Error::DegenerateRow { .. } | Error::DegenerateRepresentation { .. } => 5,
            Error::Dimension { .. } | Error::Index { .. } | Error::Contract(_) => 1,
        }
    }
}
