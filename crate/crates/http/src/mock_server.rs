//! Exposes an in-process backend over HTTP: `POST /v1/<endpoint>` with the
//! request JSON; rejections map to 422, unavailability to 503.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use speechgrain_core::backend::{Backend, BackendError};

pub fn mock_router(backend: Arc<dyn Backend>) -> Router {
    Router::new()
        .route("/v1/{endpoint}", post(handle))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(backend)
}

async fn handle(State(backend): State<Arc<dyn Backend>>, Path(endpoint): Path<String>, Json(req): Json<Value>) -> Response {
    let path = format!("/v1/{endpoint}");
    let result = tokio::task::spawn_blocking(move || backend.call(&path, &req)).await;
    match result {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(BackendError::Rejected(m))) => (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "error": m }))).into_response(),
        Ok(Err(BackendError::Unavailable(m))) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "error": m }))).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))).into_response(),
    }
}
