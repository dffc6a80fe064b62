use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown residue {0:?}")]
    UnknownResidue(char),
    #[error("source of {len} tokens exceeds the maximum of {max}")]
    OverlongSource { len: usize, max: usize },
    #[error("receptor of {len} residues exceeds the maximum of {max}")]
    OverlongTarget { len: usize, max: usize },

    #[error("physicochemical channel is disabled in this model")]
    DisabledChannel,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty split")]
    EmptySplit,
    #[error("empty sequence")]
    EmptySequence,
    #[error("empty input")]
    EmptyInput,
    #[error("empty retrieval index")]
    EmptyIndex,
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite parameters after step {step}")]
    NonFinite { step: u64 },

    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("need at least {needed} distinct contexts, found {found}")]
    TooFewContexts { needed: usize, found: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed data file: {0}")]
    DataFile(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
