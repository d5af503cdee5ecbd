use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

use diss_core::DissError;

#[derive(Error, Debug)]
pub enum ServiceError {
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("service at capacity ({0} jobs queued)")]
    AtCapacity(usize),

    #[error("{0} not found")]
    NotFound(String),

    #[error("service degraded: {0}")]
    Degraded(String),

    #[error("illegal job transition {from} -> {to}")]
    Transition { from: &'static str, to: &'static str },

    #[error(transparent)]
    Core(#[from] DissError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

impl ServiceError {
    pub fn validation(field: impl Into<String>, message: impl ToString) -> Self {
        ServiceError::Validation {
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Validation { .. } => StatusCode::BAD_REQUEST,
            ServiceError::AtCapacity(_) | ServiceError::Degraded(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = match &self {
            ServiceError::Validation { field, message } => {
                json!({ "error": "validation", "field": field, "message": message })
            }
            ServiceError::AtCapacity(_) => json!({ "error": "at_capacity", "message": self.to_string() }),
            ServiceError::NotFound(_) => json!({ "error": "not_found", "message": self.to_string() }),
            ServiceError::Degraded(_) => json!({ "error": "degraded", "message": self.to_string() }),
            _ => json!({ "error": "internal", "message": self.to_string() }),
        };
        (self.status(), Json(body)).into_response()
    }
}
