//! Error type shared by every module.
//!
//! Each variant carries a stable numeric code (see [`Error::code`]) which the
//! wire protocol and the CLI expose verbatim.

use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error, serde::Serialize, serde::Deserialize)]
pub enum Error {
    // store
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("inline payload of {size} bytes exceeds the {limit}-byte threshold; use put_blob")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("storage full: {0}")]
    StorageFull(String),
    #[error("blob data is empty")]
    EmptyBlob,
    #[error("checksum mismatch for blob `{0}`")]
    ChecksumMismatch(String),
    #[error("store is locked by another process: {0}")]
    Locked(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("store crashed at injected fault point `{0}`")]
    Crashed(String),

    // tagquery
    #[error("syntax error at byte {offset}: expected one of {}", expected.join(", "))]
    Syntax {
        offset: usize,
        expected: Vec<String>,
    },
    #[error("IN set mixes value variants at byte {offset}")]
    MixedVariantSet { offset: usize },
    #[error("type mismatch on tag `{tag}`: cannot compare {found} with {expected}")]
    TypeMismatch {
        tag: String,
        expected: String,
        found: String,
    },

    // dataset
    #[error("view not found: {0}")]
    ViewNotFound(String),
    #[error("stream already attached to view `{0}`")]
    AlreadyAttached(String),

    // modelstore
    #[error("model not found: {0}")]
    ModelNotFound(String),
    #[error("version not found: {0}")]
    VersionNotFound(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // compute
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("lambda `{0}` registered without a backward function")]
    MissingBackward(String),

    // workflow
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown view `{0}`")]
    UnknownView(String),
    #[error("stale lease on task `{0}`")]
    StaleLease(String),
    #[error("plan contains a dependency cycle: {0}")]
    CycleDetected(String),
    #[error("task not found: {0}")]
    TaskNotFound(String),
    #[error("plan not found: {0}")]
    PlanNotFound(String),
    #[error("another master holds the master lease: {0}")]
    NotMaster(String),
    #[error("handler failed: {0}")]
    Handler(String),
    #[error("invalid plan at line {line}, field `{field}`: {message}")]
    InvalidPlan {
        line: usize,
        field: String,
        message: String,
    },

    // shared
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl Error {
    /// Stable numeric code. Never renumber an existing variant.
    pub fn code(&self) -> u16 {
        match self {
            Error::DuplicateKey(_) => 1,
            Error::NotFound(_) => 2,
            Error::PayloadTooLarge { .. } => 3,
            Error::InvalidDocument(_) => 4,
            Error::StorageFull(_) => 5,
            Error::EmptyBlob => 6,
            Error::ChecksumMismatch(_) => 7,
            Error::Locked(_) => 8,
            Error::Corrupt(_) => 9,
            Error::Io(_) => 10,
            Error::Crashed(_) => 11,
            Error::Syntax { .. } => 20,
            Error::MixedVariantSet { .. } => 21,
            Error::TypeMismatch { .. } => 22,
            Error::ViewNotFound(_) => 30,
            Error::AlreadyAttached(_) => 31,
            Error::ModelNotFound(_) => 40,
            Error::VersionNotFound(_) => 41,
            Error::ShapeMismatch(_) => 42,
            Error::InvalidSpec(_) => 50,
            Error::NonFiniteLoss { .. } => 51,
            Error::DuplicateName(_) => 52,
            Error::MissingBackward(_) => 53,
            Error::UnknownModel(_) => 60,
            Error::UnknownView(_) => 61,
            Error::StaleLease(_) => 62,
            Error::CycleDetected(_) => 63,
            Error::TaskNotFound(_) => 64,
            Error::PlanNotFound(_) => 65,
            Error::NotMaster(_) => 66,
            Error::Handler(_) => 67,
            Error::InvalidPlan { .. } => 68,
            Error::InvalidArgument(_) => 90,
            Error::ConnectionLost(_) => 91,
            Error::Protocol(_) => 92,
        }
    }

    /// Short identifier used by `--json` output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DuplicateKey(_) => "DuplicateKey",
            Error::NotFound(_) => "NotFound",
            Error::PayloadTooLarge { .. } => "PayloadTooLarge",
            Error::InvalidDocument(_) => "InvalidDocument",
            Error::StorageFull(_) => "StorageFull",
            Error::EmptyBlob => "EmptyBlob",
            Error::ChecksumMismatch(_) => "ChecksumMismatch",
            Error::Locked(_) => "Locked",
            Error::Corrupt(_) => "Corrupt",
            Error::Io(_) => "Io",
            Error::Crashed(_) => "Crashed",
            Error::Syntax { .. } => "SyntaxError",
            Error::MixedVariantSet { .. } => "MixedVariantSet",
            Error::TypeMismatch { .. } => "TypeMismatch",
            Error::ViewNotFound(_) => "ViewNotFound",
            Error::AlreadyAttached(_) => "AlreadyAttached",
            Error::ModelNotFound(_) => "ModelNotFound",
            Error::VersionNotFound(_) => "VersionNotFound",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::DuplicateName(_) => "DuplicateName",
            Error::MissingBackward(_) => "MissingBackward",
            Error::UnknownModel(_) => "UnknownModel",
            Error::UnknownView(_) => "UnknownView",
            Error::StaleLease(_) => "StaleLease",
            Error::CycleDetected(_) => "CycleDetected",
            Error::TaskNotFound(_) => "TaskNotFound",
            Error::PlanNotFound(_) => "PlanNotFound",
            Error::NotMaster(_) => "NotMaster",
            Error::Handler(_) => "Handler",
            Error::InvalidPlan { .. } => "InvalidPlan",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::ConnectionLost(_) => "ConnectionLost",
            Error::Protocol(_) => "ProtocolError",
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Corrupt(format!("json: {e}"))
    }
}
