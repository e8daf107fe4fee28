use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate range: max |x| is zero, tensor cannot be quantized")]
    DegenerateRange,
    #[error("layer kind `{0}` has no quantization rule")]
    UnsupportedLayer(String),
    #[error("num_classes must be at least 2, got {0}")]
    InvalidClassCount(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("intervened batches were generated from different content arrays")]
    ContentMismatch,
    #[error("teacher has no batch-norm layers; disable the statistics loss (w_bns = 0)")]
    NoBatchNorm,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("unknown architecture `{0}` (expected tiny_cnn or resnet20)")]
    UnknownArchitecture(String),
    #[error("dataset not found at {}", .0.display())]
    DatasetNotFound(PathBuf),
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("non-finite loss at step {step}; batch stream state {rng_state}")]
    NonFiniteLoss { step: u64, rng_state: String },
    #[error("activations are constant; CKA is undefined")]
    DegenerateActivations,
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {constraint}")]
    Validation { field: String, constraint: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint not found at {}", .0.display())]
    CheckpointNotFound(PathBuf),
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] dfq_autograd::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: &str, constraint: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            constraint: constraint.into(),
        }
    }

    /// True for errors caused by user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Parse(_) | Error::Validation { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
