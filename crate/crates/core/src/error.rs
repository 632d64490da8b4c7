use thiserror::Error;

use crate::labels::{HandleId, TaintLabel};
use crate::policy::{Decision, SinkKind, UrlError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Runtime errors for sandboxed execution, the field store, and sinks.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("unknown or stale handle {0}")]
    HandleUnknown(HandleId),
    #[error("no quarantine module named {0:?}")]
    UnknownQm(String),
    #[error("quarantine module {0:?} is already registered")]
    DuplicateQm(String),
    #[error("quarantine module {qm:?} panicked: {message}")]
    QmPanicked { qm: String, message: String },
    #[error("quarantine module failed: {0}")]
    QmFailed(String),
    #[error("sandbox context is not live (used outside its quarantine module call)")]
    ContextEscaped,
    #[error("field {0:?} is already registered")]
    DuplicateField(String),
    #[error("no field named {0:?}")]
    UnknownField(String),
    #[error("label {0} is not declared in the manifest")]
    UndeclaredLabel(TaintLabel),
    #[error(transparent)]
    Url(#[from] UrlError),
    #[error("invalid destination {0:?}")]
    InvalidDestination(String),
    #[error("flow to {sink} {destination} {decision}")]
    PolicyViolation {
        sink: SinkKind,
        destination: String,
        decision: Decision,
    },
}
