use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use ladder_core::LadderError;
use serde::{Deserialize, Serialize};

/// Wire form of every error the service returns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub path: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("expected tree version {expected}, session is at {actual}")]
    Conflict { expected: u64, actual: u64 },

    #[error("session `{0}` not found")]
    NoSession(String),

    #[error("job `{0}` not found")]
    NoJob(String),

    #[error("session `{0}` already exists")]
    SessionExists(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Engine(#[from] LadderError),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Conflict { .. } | ApiError::SessionExists(_) => StatusCode::CONFLICT,
            ApiError::NoSession(_) | ApiError::NoJob(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::Engine(e) => engine_status(e),
        }
    }

    pub fn body(&self) -> ErrorBody {
        let (code, path) = match self {
            ApiError::Conflict { .. } => ("conflict", Some("expected_version".to_string())),
            ApiError::NoSession(id) => ("not_found", Some(format!("sessions/{id}"))),
            ApiError::NoJob(id) => ("not_found", Some(format!("jobs/{id}"))),
            ApiError::SessionExists(id) => ("session_exists", Some(format!("sessions/{id}"))),
            ApiError::BadRequest(_) => ("bad_request", None),
            ApiError::Internal(_) => ("internal", None),
            ApiError::Engine(e) => (e.code(), e.path()),
        };
        ErrorBody {
            code: code.into(),
            message: self.to_string(),
            path,
        }
    }
}

fn engine_status(e: &LadderError) -> StatusCode {
    use LadderError::*;
    match e {
        NotFound(_) | RevisionNotFound { .. } => StatusCode::NOT_FOUND,
        InvalidRelation(_) | InvalidTarget(_) | Parse { .. } | Range { .. } | Index { .. } | Template { .. } => {
            StatusCode::BAD_REQUEST
        }
        InputTooLarge { .. } | ContextOverflow { .. } => StatusCode::PAYLOAD_TOO_LARGE,
        Cycle { .. } | Composition { .. } | AmbiguousEdit(_) | Precondition(_) | Script { .. } => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        BackendUnavailable { .. } | BackendRejected(_) | MockMiss { .. } | ResponseFormat { .. } => {
            StatusCode::BAD_GATEWAY
        }
        Timeout { .. } => StatusCode::GATEWAY_TIMEOUT,
        RunnerUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        Cancelled => StatusCode::CONFLICT,
        Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Engine(LadderError::Io(e))
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
