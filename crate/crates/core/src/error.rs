use thiserror::Error;

/// Errors raised by simulation operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown {kind} `{id}`")]
    Lookup { kind: &'static str, id: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("scheduling error: {0}")]
    Scheduling(String),
    #[error("injection error: {0}")]
    Injection(String),
    #[error("external subsystem error: {0}")]
    External(String),
    #[error("io error: {0}")]
    Io(String),
}

impl SimError {
    pub fn validation(msg: impl Into<String>) -> Self {
        SimError::Validation(msg.into())
    }

    pub fn lookup(kind: &'static str, id: impl Into<String>) -> Self {
        SimError::Lookup { kind, id: id.into() }
    }
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SimError {
    fn from(e: serde_json::Error) -> Self {
        SimError::Validation(e.to_string())
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
