//! HTTP+JSON routes over [`Service`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{FieldError, Service, ServiceError};

pub const ROLE_HEADER: &str = "x-role";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub field_errors: Vec<FieldError>,
}

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Forbidden(_) => StatusCode::FORBIDDEN,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field_errors = match &self.0 {
            ServiceError::Validation { field_errors, .. } => field_errors.clone(),
            _ => Vec::new(),
        };
        let body = ErrorBody {
            code: self.0.code().to_owned(),
            message: self.0.to_string(),
            field_errors,
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let body: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError(ServiceError::BadRequest(format!("invalid JSON body: {e}"))))
}

/// Runs a blocking service call off the async workers.
async fn blocking<T, F>(service: Arc<Service>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError(ServiceError::Io(std::io::Error::other(e.to_string()))))?
        .map(Json)
        .map_err(ApiError)
}

async fn healthz(State(service): State<Arc<Service>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "patients": service.patient_ids().len(),
    }))
}

async fn enroll(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<super::EnrollResponse>), ApiError> {
    let req = parse(&body)?;
    let Json(resp) = blocking(service, move |s| s.enroll(&id, req)).await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn report(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<super::ReportResponse> {
    let req = parse(&body)?;
    blocking(service, move |s| s.handle_report(&id, req)).await
}

async fn device_log(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<super::DeviceLogResponse> {
    let req = parse(&body)?;
    blocking(service, move |s| s.upload_device_log(&id, req)).await
}

async fn feedback(
    State(service): State<Arc<Service>>,
    Path(rec_id): Path<String>,
    body: Bytes,
) -> ApiResult<super::FeedbackResponse> {
    let req = parse(&body)?;
    blocking(service, move |s| s.handle_feedback(&rec_id, req)).await
}

async fn latest(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
) -> ApiResult<super::RecommendationView> {
    blocking(service, move |s| s.latest_recommendation(&id)).await
}

#[derive(Debug, Deserialize)]
struct WindowQuery {
    window_days: Option<String>,
}

async fn dashboard(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<WindowQuery>,
    headers: HeaderMap,
) -> ApiResult<super::Dashboard> {
    if service.config().require_clinician_header
        && headers.get(ROLE_HEADER).and_then(|v| v.to_str().ok()) != Some("clinician")
    {
        return Err(ApiError(ServiceError::Forbidden(format!(
            "dashboard requires {ROLE_HEADER}: clinician"
        ))));
    }
    let window = match q.window_days {
        None => None,
        Some(v) => Some(v.parse::<u32>().map_err(|_| {
            ApiError(ServiceError::Validation {
                message: "request failed validation".to_owned(),
                field_errors: vec![FieldError::new("window_days", "not a positive integer")],
            })
        })?),
    };
    blocking(service, move |s| s.dashboard(&id, window)).await
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/patients/{id}", post(enroll))
        .route("/patients/{id}/reports", post(report))
        .route("/patients/{id}/device-log", post(device_log))
        .route("/patients/{id}/recommendations/latest", get(latest))
        .route("/patients/{id}/dashboard", get(dashboard))
        .route("/recommendations/{rec_id}/feedback", post(feedback))
        .with_state(service)
}

/// Binds and serves until the process is stopped.
pub async fn serve(service: Arc<Service>) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", service.config().bind, service.config().port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bind address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(service)).await
}
