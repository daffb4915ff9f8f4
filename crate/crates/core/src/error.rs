use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum CoeError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate embedding: row {0} has zero norm")]
    DegenerateEmbedding(usize),

    #[error("zero projected norm in critic")]
    ZeroProjection,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("diverged: {0}")]
    Divergence(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CoeError>,
    },
}

impl CoeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CoeError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        CoeError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Wrap an error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        CoeError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the root cause is a divergence (non-finite training state).
    pub fn is_divergence(&self) -> bool {
        match self {
            CoeError::Divergence(_) | CoeError::NonFinite(_) => true,
            CoeError::Stage { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoeError>;
