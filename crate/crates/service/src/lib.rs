//! Read-only query API, batch reports and the command-line front end over a
//! sealed run store.

pub mod api;
pub mod params;
pub mod report;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

pub use api::{router, AppState};
pub use params::QueryParams;
pub use report::{export_report, ReportFormat, ReportKind};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] trainscope::Error),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unknown report format `{0}` (expected json or csv)")]
    UnknownFormat(String),
    #[error("unknown report kind `{0}`")]
    UnknownReport(String),
    #[error("report `{0}` has no csv form")]
    NoCsv(String),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        use trainscope::Error as E;
        match self {
            ServiceError::Core(e) if e.is_not_found() => StatusCode::NOT_FOUND,
            ServiceError::Core(
                E::InvalidParameter(_) | E::UnknownMeasure(_) | E::NoPredecessor(_) | E::RawDropped,
            ) => StatusCode::BAD_REQUEST,
            ServiceError::Core(_) | ServiceError::Serialize(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    pub status: u16,
    pub error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        let body = ErrorBody {
            status: status.as_u16(),
            error: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;
