use moodbridge_core::domain::Violation;
use thiserror::Error;

use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("missing or unknown bearer token")]
    Unauthenticated,
    #[error("invalid account id or password")]
    BadCredentials,
    #[error("{0}")]
    Role(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{}", .0.iter().map(|v| format!("{}: {}", v.field, v.message)).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Violation>),
    #[error("gateway failure: {message}")]
    Gateway { message: String, retryable: bool },
    #[error(transparent)]
    Storage(#[from] StoreError),
}

impl ServiceError {
    pub fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        ServiceError::NotFound { kind, id: id.into() }
    }

    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        ServiceError::Conflict { code, message: message.into() }
    }

    /// Stable machine-readable code for the error envelope.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Unauthenticated => "unauthenticated",
            ServiceError::BadCredentials => "bad_credentials",
            ServiceError::Role(_) => "role_error",
            ServiceError::Forbidden(_) => "forbidden",
            ServiceError::NotFound { .. } => "not_found",
            ServiceError::Conflict { code, .. } => code,
            ServiceError::Invalid(_) => "invalid_request",
            ServiceError::Validation(_) => "validation_failed",
            ServiceError::Gateway { .. } => "gateway_failed",
            ServiceError::Storage(_) => "storage_error",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ServiceError::Unauthenticated | ServiceError::BadCredentials => 401,
            ServiceError::Role(_) | ServiceError::Forbidden(_) => 403,
            ServiceError::NotFound { .. } => 404,
            ServiceError::Conflict { .. } => 409,
            ServiceError::Invalid(_) => 400,
            ServiceError::Validation(_) => 422,
            ServiceError::Gateway { .. } => 502,
            ServiceError::Storage(_) => 500,
        }
    }

    /// Offending report fields, for validation errors.
    pub fn fields(&self) -> Vec<String> {
        match self {
            ServiceError::Validation(v) => v.iter().map(|v| v.field.clone()).collect(),
            _ => Vec::new(),
        }
    }
}
