use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::GeometryKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    /// A value parsed correctly but violates a domain invariant.
    #[error("invalid value: {0}")]
    Domain(String),

    #[error("geometry mismatch: expected {expected}, found {found}")]
    GeometryMismatch {
        expected: GeometryKind,
        found: GeometryKind,
    },

    #[error("cannot fit calibrator: {0}")]
    Fit(String),

    #[error("expected {expected} calibrator sets, got {found}")]
    Arity { expected: usize, found: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error comes from reading or decoding input rather than from
    /// the computation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Parse(_) | Error::Domain(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}
