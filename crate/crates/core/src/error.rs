use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("input contains no interactions")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown edge id {id} (graph has {count} edges)")]
    UnknownEdge { id: usize, count: usize },

    #[error("node {node} out of range (graph has {count} nodes)")]
    NodeOutOfRange { node: usize, count: usize },

    #[error("node {0} is not a user node")]
    NotAUser(usize),

    #[error("true item {0} is in the filter set")]
    TrueItemFiltered(usize),

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("could not draw a strict negative after {attempts} rejections")]
    NegativeSampling { attempts: usize },

    #[error("split '{0}' received zero edges")]
    EmptySplit(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("non-finite loss at batch {batch}: {diagnostics}")]
    NonFinite { batch: usize, diagnostics: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by bad input data rather than bad arguments or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::EmptyInput
                | Error::Format(_)
                | Error::VersionMismatch { .. }
                | Error::Io(_)
                | Error::Json(_)
                | Error::EmptySplit(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        Error::Parse {
            line,
            message: err.to_string(),
        }
    }
}
