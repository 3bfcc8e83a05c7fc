use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("network build error: {0}")]
    Build(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("backward called without a cached train-mode forward pass")]
    NoCachedForward,

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png {path}: {reason}")]
    Png { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            Error::Fold { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_failures_map_to_exit_code_two() {
        assert_eq!(Error::Numeric("nan".into()).exit_code(), 2);
        let wrapped = Error::Fold {
            fold: 3,
            source: Box::new(Error::Numeric("nan".into())),
        };
        assert_eq!(wrapped.exit_code(), 2);
        assert!(wrapped.to_string().starts_with("fold 3"));
        assert_eq!(Error::Data("x".into()).exit_code(), 1);
    }
}
