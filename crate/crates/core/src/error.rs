use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("dangling reference: {0} does not exist")]
    DanglingReference(PathBuf),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("insufficient successful ghostvecs: need {needed}, have {available} (short by {})", needed - available)]
    Insufficient { needed: usize, available: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("model is frozen")]
    Frozen,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
