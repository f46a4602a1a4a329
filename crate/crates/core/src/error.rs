use std::path::PathBuf;

use msenet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("no classes found under {0}")]
    NoClasses(PathBuf),
    #[error("class '{0}' contains no image files")]
    EmptyClass(String),
    #[error("duplicate class '{0}'")]
    DuplicateClass(String),
    #[error("unreadable image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("split needs {requested} classes but the index holds {available}")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid episode spec: {0}")]
    InvalidSpec(String),
    #[error("split holds {have} classes but the episode needs {need}")]
    TooFewClasses { have: usize, need: usize },
    #[error("class '{class}' has {have} items but the episode needs {need} (support + query)")]
    ClassTooSmall { class: String, have: usize, need: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("weight file {path}: missing tensors {missing:?}, mismatched tensors {mismatched:?}, unexpected tensors {unexpected:?}")]
    WeightLayout { path: PathBuf, missing: Vec<String>, mismatched: Vec<String>, unexpected: Vec<String> },
    #[error("archive {path}: {reason}")]
    Archive { path: PathBuf, reason: String },
    #[error("checkpoint {0} not found")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint format version '{found}', this build reads '{expected}'")]
    Version { found: String, expected: String },
    #[error("checkpoint variant mismatch: file holds '{found}', config expects '{expected}'")]
    VariantMismatch { found: String, expected: String },
    #[error("non-finite loss at step {step} (episode seed {seed}); parameter norms: {norms}")]
    Diverged { step: u64, seed: u64, norms: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Errors caused by the configuration or invocation rather than by the run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidSpec(_))
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
