use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("capture probability {value} at t = {t} s exceeds 1; parameters are outside the approximation's validity region")]
    InvalidApproximation { t: f64, value: f64 },

    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("target is not a one-hot vector")]
    NotOneHot,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("trace was not recorded by this network")]
    TraceMismatch,

    #[error("channel surrogate must be frozen before end-to-end training")]
    SurrogateNotFrozen,

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged {
        epoch: usize,
        detail: String,
        /// Serialized snapshot of the last parameters that produced a finite loss.
        last_good: Option<Vec<u8>>,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint role mismatch: expected `{expected}`, found `{found}`")]
    RoleMismatch { expected: String, found: String },

    #[error("unknown scenario `{0}` (expected scenario1 or scenario2)")]
    UnknownScenario(String),

    #[error("{path}: {source}")]
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
