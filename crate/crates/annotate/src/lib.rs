//! HTTP/JSON API over the annotation queue.
//!
//! | method | path | reply |
//! |---|---|---|
//! | `GET` | `/api/queue/next` | 200 queue entry, 204 when nothing is left |
//! | `POST` | `/api/labels` | 201 stored label; 404 unknown event; 422 bad label |
//! | `GET` | `/api/progress` | counts per label plus `unlabeled` |
//! | `GET` | `/api/events/{id}` | queue entry with context turns, or 404 |
//! | `GET` | `/api/export` | exported labels as JSON lines |
//!
//! Everything else is answered from the UI directory when one is configured,
//! otherwise `/` returns a short index page.

use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use overlap_core::annotation::{AnnotationError, Label, LabelStore};
use overlap_core::jsonl;

const INDEX_HTML: &str = include_str!("index.html");

/// Shared store. Writers take the lock exclusively, so log appends are serialized
/// and every read sees the last committed label.
pub type SharedStore = Arc<RwLock<LabelStore>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub event_id: String,
    pub label: String,
    pub annotator_id: String,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = match e {
            AnnotationError::NotFound(_) => StatusCode::NOT_FOUND,
            AnnotationError::InvalidLabel(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("label store: {e}");
        }
        ApiError(status, e.to_string())
    }
}

fn poisoned() -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, "label store lock poisoned".into())
}

async fn next_entry(State(store): State<SharedStore>) -> Result<Response, ApiError> {
    let store = store.read().map_err(|_| poisoned())?;
    Ok(match store.next_unlabeled() {
        Some(entry) => Json(entry).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit(State(store): State<SharedStore>, Json(req): Json<LabelRequest>) -> Result<Response, ApiError> {
    let label: Label = req.label.parse()?;
    if req.annotator_id.trim().is_empty() {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, "annotator_id must not be empty".into()));
    }
    let mut store = store.write().map_err(|_| poisoned())?;
    let record = store.submit_label(&req.event_id, label, &req.annotator_id)?;
    log::info!("{} labeled {} by {}", record.event_id, record.label, record.annotator_id);
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn progress(State(store): State<SharedStore>) -> Result<Response, ApiError> {
    let store = store.read().map_err(|_| poisoned())?;
    Ok(Json(store.progress()).into_response())
}

async fn event(State(store): State<SharedStore>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let store = store.read().map_err(|_| poisoned())?;
    match store.entry(&id) {
        Some(entry) => Ok(Json(entry).into_response()),
        None => Err(AnnotationError::NotFound(id).into()),
    }
}

async fn export(State(store): State<SharedStore>) -> Result<Response, ApiError> {
    let labels = store.read().map_err(|_| poisoned())?.export_labels();
    let body = jsonl::to_bytes(&labels).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

/// Builds the application. `ui_dir`, when given, is served at `/`.
pub fn router(store: SharedStore, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/queue/next", get(next_entry))
        .route("/api/labels", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/events/{id}", get(event))
        .route("/api/export", get(export))
        .with_state(store);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.route("/", get(index)),
    }
}

pub fn shared(store: LabelStore) -> SharedStore {
    Arc::new(RwLock::new(store))
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: String,
    pub ui_dir: Option<PathBuf>,
}

/// Binds and serves until the process is stopped.
pub async fn serve(store: LabelStore, options: &ServeOptions) -> io::Result<()> {
    let listener = TcpListener::bind(&options.addr).await?;
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(shared(store), options.ui_dir.as_deref())).await
}
