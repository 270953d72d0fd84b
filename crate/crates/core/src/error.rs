use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("target row {row} is not a distribution (sum = {sum})")]
    NotStochastic { row: usize, sum: f64 },

    #[error("architecture has no hidden layer to extract features from")]
    NoHiddenLayer,

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },

    #[error("cannot normalize by a zero-norm reference model")]
    ZeroNorm,

    #[error("partition unsatisfiable: {0}")]
    PartitionUnsatisfiable(String),

    #[error("client {client} diverged to non-finite parameters in round {round}")]
    Diverged { client: usize, round: usize },

    #[error("distillation loss became non-finite at step {step} (round {round}, last finite loss {last_loss})")]
    DistillDiverged {
        round: usize,
        step: usize,
        last_loss: f64,
    },

    #[error("{path}: bad IDX magic number, expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated IDX file, expected {expected} bytes, found {found}")]
    IdxTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
