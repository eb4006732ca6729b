use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed or invalid record in a line-oriented input file.
    #[error("{}:{line}: {msg}", path.display())]
    Record {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown relation {0:?}")]
    UnknownRelation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward called on a consumed tape")]
    TapeConsumed,

    #[error("summarization client: {0}")]
    Client(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn record(path: impl AsRef<Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Record {
            path: path.as_ref().to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end: 1 usage, 2 data,
    /// 3 runtime or numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Io { .. }
            | Error::Record { .. }
            | Error::Data(_)
            | Error::UnknownRelation(_)
            | Error::Checkpoint(_) => 2,
            Error::Shape(_) | Error::NonFinite(_) | Error::TapeConsumed | Error::Client(_) => 3,
        }
    }
}
