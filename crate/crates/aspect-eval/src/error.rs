//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid score {value}: must be a finite number in [0,1]")]
    ScoreOutOfRange { value: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unknown aspect id '{0}'")]
    UnknownAspect(String),

    #[error("ambiguous aspect name '{name}': {count} catalog entries match")]
    AmbiguousAspect { name: String, count: usize },

    #[error("no verbalizer template for aspect '{0}'")]
    MissingTemplate(String),

    #[error("unresolved template slot '{0}'")]
    UnresolvedSlot(String),

    #[error("unexpected payload key '{0}'")]
    UnexpectedPayload(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("replay fixture miss for request {0}")]
    FixtureMiss(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error on {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Backend(_) | Error::FixtureMiss(_) => 3,
            _ => 2,
        }
    }
}
