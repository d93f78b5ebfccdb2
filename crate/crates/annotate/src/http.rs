//! JSON-over-HTTP surface for the annotation client.
//!
//! | route | |
//! |---|---|
//! | `GET /api/next?annotator=ID` | next sequence (id, presentation index, frame URLs) |
//! | `GET /api/sequence/{id}/frame/{k}` | frame image bytes |
//! | `POST /api/annotate` | [`AnnotationRecord`] body → `{"status": "recorded" \| "duplicate"}` |
//! | `GET /api/concordance` | [`Concordance`] |
//! | `GET /api/export?train_fraction=F&seed=S` | [`Export`] |
//!
//! Nothing served to the client reveals a sequence's light dose or stage position.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::campaign::{Ack, Campaign, DEFAULT_TRAIN_FRACTION};
use crate::catalog::FRAMES_PER_SEQUENCE;
use crate::error::AnnotateError;
use crate::log::AnnotationRecord;

pub type Shared = Arc<Mutex<Campaign>>;

/// What the client sees of a presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextResponse {
    pub sequence: String,
    pub presentation: u64,
    pub frames: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    train_fraction: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct AckResponse {
    status: Ack,
}

impl IntoResponse for AnnotateError {
    fn into_response(self) -> Response {
        let status = match &self {
            AnnotateError::UnknownSequence(_) => StatusCode::NOT_FOUND,
            AnnotateError::Conflict { .. } => StatusCode::CONFLICT,
            AnnotateError::Exhausted(_) | AnnotateError::NothingExported => StatusCode::GONE,
            AnnotateError::Invalid(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

fn lock(state: &Shared) -> std::sync::MutexGuard<'_, Campaign> {
    // A panic while holding the lock cannot leave a half-applied change:
    // state is only touched after the log append succeeds.
    state.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

async fn next(State(state): State<Shared>, Query(q): Query<NextQuery>) -> Result<Json<NextResponse>, AnnotateError> {
    let mut campaign = lock(&state);
    let (p, item) = campaign.next_sequence(&q.annotator)?;
    let frames = (0..item.frames.len()).map(|k| format!("/api/sequence/{}/frame/{k}", p.sequence)).collect();
    Ok(Json(NextResponse { sequence: p.sequence, presentation: p.index, frames }))
}

async fn frame(State(state): State<Shared>, Path((id, k)): Path<(String, usize)>) -> Result<Response, AnnotateError> {
    if k >= FRAMES_PER_SEQUENCE {
        return Err(AnnotateError::Invalid(format!("frame {k} outside 0..{FRAMES_PER_SEQUENCE}")));
    }
    let path: PathBuf = lock(&state).catalog().frame_path(&id, k)?;
    let bytes = tokio::fs::read(&path).await?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("pgm") => "image/x-portable-graymap",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn annotate(State(state): State<Shared>, Json(rec): Json<AnnotationRecord>) -> Result<Json<AckResponse>, AnnotateError> {
    let status = lock(&state).record(rec)?;
    Ok(Json(AckResponse { status }))
}

async fn concordance(State(state): State<Shared>) -> impl IntoResponse {
    Json(lock(&state).concordance())
}

async fn export(State(state): State<Shared>, Query(q): Query<ExportQuery>) -> Result<impl IntoResponse, AnnotateError> {
    let export = lock(&state).export(q.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION), q.seed.unwrap_or(0))?;
    Ok(Json(export))
}

/// The API routes, plus static files from `ui` (if given) for everything else.
pub fn router(state: Shared, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/next", get(next))
        .route("/api/sequence/{id}/frame/{k}", get(frame))
        .route("/api/annotate", post(annotate))
        .route("/api/concordance", get(concordance))
        .route("/api/export", get(export))
        .with_state(state);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
