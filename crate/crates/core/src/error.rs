use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rank index out of range: {index} not in 1..={len}")]
    RankOutOfRange { index: usize, len: usize },

    #[error("swap requires k < j, got k={k}, j={j}")]
    SwapOrder { k: usize, j: usize },

    #[error("empty ranking")]
    EmptyRanking,

    #[error("ranking is incomplete: {len} of {expected} candidates")]
    IncompleteRanking { len: usize, expected: usize },

    #[error("item {0} has no relevance entry")]
    MissingGain(u32),

    #[error("need at least {needed} candidates, got {got}")]
    TooFewCandidates { needed: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing embedding for item {0}")]
    MissingEmbedding(u32),

    #[error("missing input for need {need}: {what}")]
    MissingNeedInput { need: &'static str, what: &'static str },

    #[error("rollout does not belong to context {0}")]
    ContextMismatch(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at {stage} {index}: {detail}")]
    Diverged {
        stage: &'static str,
        index: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short category for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::RankOutOfRange { .. } | Error::SwapOrder { .. } => "rank",
            Error::EmptyRanking | Error::IncompleteRanking { .. } | Error::ContextMismatch(_) => "ranking",
            Error::MissingGain(_) | Error::MissingNeedInput { .. } => "relevance",
            Error::TooFewCandidates { .. } | Error::Empty(_) => "empty",
            Error::Dimension(_) => "dimension",
            Error::InvalidArgument(_) | Error::NonFinite(_) => "argument",
            Error::MissingEmbedding(_) => "embedding",
            Error::Parse { .. } | Error::Csv(_) => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}
