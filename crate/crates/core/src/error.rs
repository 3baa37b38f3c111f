use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: line {line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid demonstration set: {0}")]
    InvalidDemoSet(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("step called on a finished episode")]
    EpisodeDone,

    #[error("unknown environment id `{0}`")]
    UnknownEnv(String),

    #[error("unknown method id `{0}`")]
    UnknownMethod(String),

    #[error(
        "could not collect {needed} demonstrations per group within {episodes} episodes \
         (safe: {safe}, unsafe: {unsafe_count})"
    )]
    InsufficientDemos {
        needed: usize,
        episodes: usize,
        safe: usize,
        unsafe_count: usize,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
