use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use namestruct::activeloop::LoopError;
use namestruct::corpus::CorpusError;
use serde_json::json;

/// An error response: `{"error": message, "code": machine-readable code}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "code": self.code }))).into_response()
    }
}

impl From<LoopError> for ApiError {
    fn from(e: LoopError) -> Self {
        let message = e.to_string();
        match e {
            LoopError::SessionComplete(_) => Self::conflict("session_complete", message),
            LoopError::WrongPhase { .. } => Self::conflict("wrong_state", message),
            LoopError::NotPending { .. } => Self::conflict("not_pending", message),
            LoopError::InvalidLabels(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_labels", message),
            LoopError::UnknownVerification(_) => Self::new(StatusCode::BAD_REQUEST, "unknown_id", message),
            LoopError::InvalidParams(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_params", message),
            LoopError::Corpus(c) => c.into(),
            LoopError::Metrics(_) => Self::bad_request(message),
            LoopError::Model(_) | LoopError::Version { .. } | LoopError::Corrupt(_) | LoopError::Io(_) => {
                Self::internal(message)
            }
        }
    }
}

impl From<CorpusError> for ApiError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Self::new(StatusCode::NOT_FOUND, "corpus_not_found", io.to_string())
            }
            CorpusError::Io(io) => Self::internal(io.to_string()),
            other => Self::new(StatusCode::BAD_REQUEST, "invalid_corpus", other.to_string()),
        }
    }
}
