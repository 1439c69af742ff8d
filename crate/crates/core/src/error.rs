use std::path::PathBuf;

use crate::inversion::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("ingestion error at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("ingestion error: {0}")]
    Dataset(String),

    #[error("training diverged at {stage} {index}: {reason}")]
    Training {
        stage: &'static str,
        index: usize,
        reason: String,
        breakdown: Option<Box<LossBreakdown>>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("backend capability missing: {0}")]
    Capability(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Torch(#[from] tch::TchError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Json(_) => 2,
            Error::Ingestion { .. } | Error::Dataset(_) => 3,
            Error::Training { .. } | Error::Numeric(_) | Error::Torch(_) => 4,
            Error::Capability(_) => 5,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io { .. } | Error::Image(_) => 1,
        }
    }
}
