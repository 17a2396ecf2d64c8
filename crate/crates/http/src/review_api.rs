//! Review service HTTP API.
//!
//! | Method | Path | Body | Result |
//! |---|---|---|---|
//! | GET | `/api/queue?reviewer=R[&role=adjudicator]` | | items awaiting R |
//! | GET | `/api/items/{id}` | | blinded item view with `audio_url` |
//! | POST | `/api/items/{id}/review` | `{decision, expected_version}` | updated view |
//! | POST | `/api/items/{id}/adjudicate` | `{decision, expected_version}` | updated view |
//! | GET | `/api/export/retained` | | JSONL of retained records |
//! | GET | `/api/audio/{id}` | | the item's audio file |
//!
//! Errors: 404 unknown item; 409 version conflict, duplicate reviewer or a
//! transition not allowed in the current state; 422 invalid decision or
//! record.

use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use speechgrain_core::review::{AdjudicationDecision, ItemView, ReviewDecision, ReviewError, ReviewItem, ReviewQueue};
use speechgrain_core::schema::render_manifest;

pub struct ReviewService {
    pub queue: ReviewQueue,
    /// Base for relative audio paths.
    pub audio_root: PathBuf,
}

impl ReviewService {
    pub fn new(queue: ReviewQueue, audio_root: impl Into<PathBuf>) -> Self {
        Self { queue, audio_root: audio_root.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiItem {
    #[serde(flatten)]
    pub view: ItemView,
    pub audio_url: String,
}

impl ApiItem {
    fn of(item: &ReviewItem) -> Self {
        Self { view: ItemView::of(item), audio_url: audio_url(&item.item_id) }
    }
}

fn audio_url(id: &str) -> String {
    format!("/api/audio/{id}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewSubmission {
    pub decision: ReviewDecision,
    pub expected_version: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjudicationSubmission {
    pub decision: AdjudicationDecision,
    pub expected_version: u64,
}

#[derive(Debug, Deserialize)]
struct QueueQuery {
    reviewer: Option<String>,
    role: Option<String>,
}

pub fn review_router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/items/{id}", get(item))
        .route("/api/items/{id}/review", post(review))
        .route("/api/items/{id}/adjudicate", post(adjudicate))
        .route("/api/export/retained", get(export))
        .route("/api/audio/{id}", get(audio))
        .with_state(service)
}

struct ApiError(StatusCode, serde_json::Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl ApiError {
    fn from_review(e: ReviewError, svc: &ReviewService, id: &str) -> Self {
        let (status, kind) = match &e {
            ReviewError::NotFound(_) => (StatusCode::NOT_FOUND, "NotFound"),
            ReviewError::VersionConflict { .. } => (StatusCode::CONFLICT, "VersionConflict"),
            ReviewError::DuplicateReviewer(_) => (StatusCode::CONFLICT, "DuplicateReviewer"),
            ReviewError::DuplicateItem(_) => (StatusCode::CONFLICT, "DuplicateItem"),
            ReviewError::InvalidState { .. } => (StatusCode::CONFLICT, "InvalidState"),
            ReviewError::InvalidDecision(_) => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidDecision"),
            ReviewError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "Validation"),
            ReviewError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Io"),
        };
        let current = svc.queue.get(id).map(|i| i.version);
        ApiError(status, json!({ "error": kind, "message": e.to_string(), "current_version": current }))
    }

    fn not_found(id: &str) -> Self {
        ApiError(StatusCode::NOT_FOUND, json!({ "error": "NotFound", "message": format!("no item {id}") }))
    }
}

async fn queue(State(svc): State<Arc<ReviewService>>, Query(q): Query<QueueQuery>) -> Json<Vec<ApiItem>> {
    let adjudicator = q.role.as_deref().is_some_and(|r| r.eq_ignore_ascii_case("adjudicator"));
    let views = svc.queue.queue_for(q.reviewer.as_deref(), adjudicator);
    Json(views.into_iter().map(|v| ApiItem { audio_url: audio_url(&v.item_id), view: v }).collect())
}

async fn item(State(svc): State<Arc<ReviewService>>, Path(id): Path<String>) -> Result<Json<ApiItem>, ApiError> {
    svc.queue.get(&id).map(|i| Json(ApiItem::of(&i))).ok_or_else(|| ApiError::not_found(&id))
}

async fn review(
    State(svc): State<Arc<ReviewService>>,
    Path(id): Path<String>,
    Json(body): Json<ReviewSubmission>,
) -> Result<Json<ApiItem>, ApiError> {
    svc.queue
        .submit_review(&id, body.decision, body.expected_version)
        .map(|i| Json(ApiItem::of(&i)))
        .map_err(|e| ApiError::from_review(e, &svc, &id))
}

async fn adjudicate(
    State(svc): State<Arc<ReviewService>>,
    Path(id): Path<String>,
    Json(body): Json<AdjudicationSubmission>,
) -> Result<Json<ApiItem>, ApiError> {
    svc.queue
        .submit_adjudication(&id, body.decision, body.expected_version)
        .map(|i| Json(ApiItem::of(&i)))
        .map_err(|e| ApiError::from_review(e, &svc, &id))
}

async fn export(State(svc): State<Arc<ReviewService>>) -> Response {
    let body = render_manifest(&svc.queue.export_retained());
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("wav") => "audio/wav",
        Some("mp3") => "audio/mpeg",
        Some("flac") => "audio/flac",
        Some("ogg") | Some("opus") => "audio/ogg",
        _ => "application/octet-stream",
    }
}

async fn audio(State(svc): State<Arc<ReviewService>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let item = svc.queue.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let path = svc.audio_root.join(&item.record.audio_path);
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response()),
        Err(e) => Err(ApiError(
            StatusCode::NOT_FOUND,
            json!({ "error": "AudioNotFound", "message": format!("{}: {e}", path.display()) }),
        )),
    }
}
