use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    Validation(String),

    #[error("conversation already ended ({0}); no further turns may be appended")]
    Absorbing(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "enumeration too large: {states} states exceeds budget {budget} \
         (vocab_size={vocab_size}, max_msg_len={max_msg_len}, horizon_cap={horizon_cap}, \
         customer_messages={customer_messages})"
    )]
    EnumerationTooLarge {
        states: u128,
        budget: u64,
        vocab_size: usize,
        max_msg_len: usize,
        horizon_cap: usize,
        customer_messages: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("episode {episode}: {source}")]
    Episode {
        episode: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("run directory {0} is locked by another invocation")]
    Locked(PathBuf),

    #[error("checkpoint missing: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
