use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },

    #[error("ill-formed BIO sequence at position {position}: {reason}")]
    IllFormedBio { position: usize, reason: String },

    #[error("invalid utterance `{id}`: {reason}")]
    InvalidUtterance { id: String, reason: String },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("unknown slot type `{0}`")]
    UnknownSlotType(String),

    #[error("invalid synthesis spec: {0}")]
    InvalidSynthSpec(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("token id {id} out of range for a vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("sequence of length {len} exceeds the configured maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("training data contains target-domain utterance `{0}`")]
    Leakage(String),

    #[error("{path}: {reason}")]
    SchemaMismatch { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
