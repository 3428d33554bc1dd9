use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("{file}: record {record}: {msg}")]
    Format {
        file: String,
        record: usize,
        msg: String,
    },

    #[error("checkpoint mismatch on `{field}`: expected {expected}, found {found}")]
    CheckpointMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<String>, record: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            record,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input (configs, shapes, arguments)
    /// rather than by the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Invalid(_)
                | Error::Shape { .. }
                | Error::CheckpointMismatch { .. }
        )
    }
}
