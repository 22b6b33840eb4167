use std::io;

use thiserror::Error;

use crate::ring::ParticipantId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("configuration invalid:\n{}", format_fields(.0))]
    Config(Vec<FieldError>),

    #[error("rank deficient system: {0}")]
    RankDeficient(String),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

/// Failures of a secure-sum exchange. Every variant carries the exchange round.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("round {round}: participants {missing:?} dropped out before completing")]
    Dropout {
        round: u32,
        missing: Vec<ParticipantId>,
    },

    #[error("round {round}: payload length {got} does not match {expected}")]
    LengthMismatch { round: u32, expected: usize, got: usize },

    #[error("round {round}: timed out after {millis} ms waiting for {waiting_on}")]
    Timeout {
        round: u32,
        millis: u64,
        waiting_on: String,
    },

    #[error("round {round}: unexpected message: {detail}")]
    Unexpected { round: u32, detail: String },

    #[error("round {round}: missing submission from grid participant {grid}")]
    MissingSubmission { round: u32, grid: String },

    #[error("round {round}: link failure: {detail}")]
    Link { round: u32, detail: String },

    #[error("malformed frame: {0}")]
    Frame(String),
}

/// IDX parsing failures, one variant per distinguishable defect.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated payload: header promises {expected} bytes, file has {found}")]
    Truncated { expected: usize, found: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {0} outside 0..10")]
    BadLabel(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

fn format_fields(fields: &[FieldError]) -> String {
    fields
        .iter()
        .map(|f| format!("  {}: {}", f.field, f.message))
        .collect::<Vec<_>>()
        .join("\n")
}
