use std::path::PathBuf;

use crate::types::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate embedding: norm below 1e-12")]
    ZeroVector,

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("unknown action `{0}`")]
    UnknownAction(String),

    #[error("no observation map for modality {0}")]
    UnknownModality(Modality),

    #[error("requested output set is empty")]
    EmptyRequest,

    #[error("malformed token stream: {0}")]
    MalformedStream(String),

    #[error("unknown model component `{0}`")]
    UnknownComponent(String),

    #[error("modality set is empty")]
    EmptySet,

    #[error("epoch {epoch} outside 1..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("no realizable task for sample {sample} under the allowed composition classes")]
    NoRealizableTask { sample: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("gradient check failed: {0}")]
    GradientCheck(String),
    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    #[error("sample {index} could not be encoded: {source}")]
    SampleEncoding {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("episode {episode}: step {got} does not follow step {last}")]
    NonMonotonicStep { episode: String, last: u64, got: u64 },

    #[error("unknown episode `{0}`")]
    UnknownEpisode(String),

    #[error("provider error (request {request_hash}): {message}")]
    Provider { request_hash: String, message: String },

    #[error("instruction pool is empty")]
    EmptyPool,

    #[error("provider output is not a valid plan: {0}")]
    UnparseablePlan(String),

    #[error("{count} test samples also appear in training or knowledge data")]
    DisjointnessViolation { count: usize },

    #[error("episode {episode} has {len} transitions, {needed} required")]
    EpisodeTooShort {
        episode: String,
        len: usize,
        needed: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Error classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Train,
    Provider,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Train => 4,
            ErrorClass::Provider => 5,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::UnknownComponent(_) => ErrorClass::Config,
            Error::Provider { .. } | Error::EmptyPool | Error::UnparseablePlan(_) => ErrorClass::Provider,
            Error::NonFiniteLoss { .. }
            | Error::EpochOutOfRange { .. }
            | Error::NoRealizableTask { .. }
            | Error::GradientCheck(_)
            | Error::ZeroVector
            | Error::DimensionMismatch { .. }
            | Error::EmptyRequest
            | Error::EmptySet
            | Error::MalformedStream(_) => ErrorClass::Train,
            _ => ErrorClass::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
