use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error("triple references unknown entities: {}", .0.join(", "))]
    UnknownEntities(Vec<String>),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("entity `{0}` has no surface forms")]
    NoForms(String),
    #[error("self-pair ({0}, {0}) is not a valid group")]
    SelfPair(String),
    #[error("overlapping entity spans")]
    OverlappingSpans,
    #[error("entity span does not align with token boundaries")]
    SpanMisaligned,
    #[error("sentence contains a literal marker token `{0}`")]
    MarkerCollision(String),
    #[error("bag has no supporting sentences")]
    EmptyBag,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("input file not found: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("span {span:?} out of bounds for {rows} rows")]
    SpanOutOfBounds { span: (usize, usize), rows: usize },
    #[error("no precomputed states for sentence `{0}`")]
    MissingSid(String),
    #[error("non-finite loss at step {step} (bag {bag})")]
    NonFiniteLoss { step: usize, bag: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("gold triple ({0}, {1}, {2}) has no test group")]
    GoldWithoutGroup(String, String, String),
    #[error("config underdetermined: {0}")]
    Underdetermined(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation failures (bad inputs or config) as opposed to runtime faults.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Malformed { .. }
                | Error::UnknownEntities(_)
                | Error::Config(_)
                | Error::UnknownKey(_)
                | Error::MissingInput(_)
                | Error::Underdetermined(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
