use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    /// Bad request contents; `details` carries structured context such as
    /// the per-input shapes of a size mismatch.
    #[error("{message}")]
    Validation { message: String, details: Option<Value> },

    #[error("{0}")]
    NotFound(String),

    #[error("{0}")]
    Conflict(String),

    #[error("the job queue for model `{0}` is full")]
    QueueFull(String),

    /// A checkpoint that could not be read or failed its fingerprint checks.
    #[error("{0}")]
    Load(String),

    #[error("{0}")]
    JobFailed(String),

    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn validation(message: impl Into<String>) -> Self {
        ServiceError::Validation {
            message: message.into(),
            details: None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Validation { .. } => "validation",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::QueueFull(_) => "queue_full",
            ServiceError::Load(_) => "load",
            ServiceError::JobFailed(_) => "job_failed",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::QueueFull(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Load(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::JobFailed(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.to_string(), "kind": self.kind() });
        if let ServiceError::Validation { details: Some(d), .. } = &self {
            body["details"] = d.clone();
        }
        (self.status(), Json(body)).into_response()
    }
}
