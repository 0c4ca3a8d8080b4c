//! HTTP routes over [`ServiceState`]. Bodies are parsed here rather than by
//! extractors so malformed requests get the same JSON error shape as
//! everything else.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dlow_core::service::{ErrorKind, ServiceError, ServiceResult, ServiceState};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const MAX_BODY_BYTES: usize = 8 * 1024 * 1024;

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/translate", post(translate))
        .route("/sweep", post(sweep))
        .route("/info", get(info))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

struct ApiError(ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

fn error(kind: ErrorKind, message: String) -> ApiError {
    ApiError(ServiceError { kind, message })
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| error(ErrorKind::BadRequest, format!("invalid request body: {e}")))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T, F>(f: F) -> Result<Json<T>, ApiError>
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> ServiceResult<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(result) => result.map(Json).map_err(ApiError),
        Err(e) => Err(error(ErrorKind::Internal, format!("worker failed: {e}"))),
    }
}

async fn translate(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let req = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    blocking(move || state.handle_translate(&req)).await.into_response()
}

async fn sweep(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let req = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    blocking(move || state.sweep(&req)).await.into_response()
}

async fn info(State(state): State<Arc<ServiceState>>) -> Response {
    Json(state.handle_info()).into_response()
}

async fn health(State(state): State<Arc<ServiceState>>) -> Response {
    Json(serde_json::json!({ "status": "ok", "models": state.len() })).into_response()
}
