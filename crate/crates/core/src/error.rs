use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("intensity spread is zero (constant input)")]
    ZeroSpread,
    #[error("too few subjects to split: {0}")]
    TooFewSubjects(usize),
    #[error("mask channel has no foreground pixel")]
    EmptyMask,
    #[error("scribble has no annotated pixel")]
    EmptyScribble,
    #[error("empty score batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial size {height}x{width} is not divisible by {divisor}")]
    IndivisibleShape { height: usize, width: usize, divisor: usize },
    #[error("weight is zero; spectral norm undefined")]
    ZeroWeight,
    #[error("no unpaired masks available for the discriminator")]
    NoUnpairedMasks,
    #[error("too few non-zero pairs for the signed-rank test: {0}")]
    TooFewPairs(usize),
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("training interrupted")]
    Interrupted,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
