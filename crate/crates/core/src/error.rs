use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("no mutation targets")]
    NoTargets,

    #[error("no replacement candidates left")]
    NoCandidates,

    #[error("subtoken id {0} is out of vocabulary")]
    UnknownId(u32),

    #[error("position {position} exceeds maximum {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("example of {length} subtokens exceeds budget {budget}")]
    OverBudget { length: usize, budget: usize },

    #[error("gold location {gold} is not in the location mask")]
    GoldOutsideMask { gold: usize },

    #[error("rejected benchmark pair {index}: {reason}")]
    RejectedPair { index: usize, reason: String },

    #[error("incompatible annotation schema: {0}")]
    IncompatibleSchema(String),

    #[error("training diverged at step {step} (loss {loss}); state dumped to {dump:?}")]
    Diverged {
        step: u64,
        loss: f64,
        dump: Option<PathBuf>,
    },

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
