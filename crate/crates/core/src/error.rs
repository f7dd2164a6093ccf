use crate::backends::SchemaId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("endpoint returned an empty completion")]
    EmptyCompletion,

    #[error("schema violation for {schema} after {attempts} attempt(s): {message}")]
    SchemaViolation {
        schema: SchemaId,
        attempts: u32,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("generation rejected: {0}")]
    GenerationRejected(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("edit requested without a base image")]
    MissingBaseImage,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("template placeholder {{{0}}} has no binding")]
    MissingSlot(String),

    #[error("unknown template: {0}")]
    UnknownTemplate(String),

    #[error("unknown decision node: {0}")]
    UnknownNode(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("sqlite error: {0}")]
    Sqlite(#[from] rusqlite::Error),

    #[error("corrupt store: {0}")]
    CorruptStore(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("unknown trajectory id {0}")]
    UnknownId(i64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("knowledge base has no trajectories to retrieve from")]
    NeedsTrajectories,

    #[error("duplicate prompt id in batch spec: {0}")]
    DuplicateId(String),
}

impl Error {
    /// Stable machine-readable kind, used in CLI error JSON and FFI status mapping.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Transport(_) => "TransportError",
            Error::Protocol(_) => "ProtocolError",
            Error::EmptyCompletion => "EmptyCompletion",
            Error::SchemaViolation { .. } => "SchemaViolation",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::GenerationRejected(_) => "GenerationRejected",
            Error::Decode(_) => "DecodeError",
            Error::MissingBaseImage => "MissingBaseImage",
            Error::Precondition(_) => "PreconditionViolation",
            Error::MissingSlot(_) => "MissingSlot",
            Error::UnknownTemplate(_) => "UnknownTemplate",
            Error::UnknownNode(_) => "UnknownNode",
            Error::Io(_) => "IoError",
            Error::Sqlite(_) => "IoError",
            Error::CorruptStore(_) => "CorruptStore",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::UnknownId(_) => "UnknownId",
            Error::Config(_) => "ConfigError",
            Error::EmptyPrompt => "EmptyPrompt",
            Error::NeedsTrajectories => "NeedsTrajectories",
            Error::DuplicateId(_) => "DuplicateId",
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
