use std::path::PathBuf;

/// Errors raised by the modelling, training and evaluation routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value at coordinate {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{family} requires an audio embedding but the sample has none")]
    MissingAudio { family: &'static str },

    #[error("sampling mode requires a noise source")]
    MissingNoise,

    #[error("{}:{line}: {message}", path.display())]
    Data {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
