use std::path::PathBuf;

use avic_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic number {found}, expected {expected}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    RecordSize { path: PathBuf, len: usize, record: usize },

    #[error("{path}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        label: usize,
        classes: usize,
    },

    #[error("dataset file not found: {0}")]
    MissingDataset(String),

    #[error("unknown dataset `{0}` (expected mnist, cifar10 or cifar100)")]
    UnknownDataset(String),

    #[error("unknown classifier architecture `{0}` (expected resnet_small or plain_cnn)")]
    UnknownArch(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("weights file {path}: {detail}")]
    CorruptWeights { path: PathBuf, detail: String },

    #[error("weights file {path}: unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("parameter store `{0}` is frozen")]
    Frozen(String),

    #[error("parameter store `{0}` must be frozen for this stage")]
    NotFrozen(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        #[source]
        source: TensorError,
    },

    #[error("{detail}")]
    Degenerate { detail: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("report: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attributes an error to a pipeline stage.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
