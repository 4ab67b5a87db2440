use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("scene generation failed after {attempts} attempts: cannot satisfy {constraint}")]
    SceneGeneration { constraint: String, attempts: usize },

    #[error("average precision is undefined: no ground-truth objects")]
    NoGroundTruth,

    #[error("non-finite {quantity} at step {step}")]
    NonFinite { quantity: &'static str, step: usize },

    #[error("failed to parse {}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::InvalidInput(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
