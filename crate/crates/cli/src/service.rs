//! HTTP session service: upload an image, propose placements, apply edits.
//!
//! Models are loaded once and shared read-only; each session keeps an
//! append-only log of placement turns and edits behind its own lock.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use touchedit_core::editor::{sample_edit, Conditioning, EditResult, EditorModel};
use touchedit_core::placement::{predict_placement, PlacementModel, PlacementResult};
use touchedit_core::{Error, Image, NormalizedBBox, TouchPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub addr: String,
    pub placement: Option<std::path::PathBuf>,
    pub editor: Option<std::path::PathBuf>,
    pub max_upload_bytes: usize,
    pub max_side: u32,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), placement: None, editor: None, max_upload_bytes: 8 << 20, max_side: 2048 }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::TouchOutOfBounds { .. } | Error::CoordOutOfRange(_) | Error::InvalidBox(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::InvalidImage(_) | Error::Codec(_) | Error::UnknownWord(_) | Error::ContextOverflow { .. } => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize)]
pub struct Turn {
    pub turn: usize,
    pub instruction: String,
    pub touch: TouchPoint,
    pub placement: PlacementResult,
}

#[derive(Debug, Clone)]
struct StoredEdit {
    id: usize,
    turn: usize,
    bbox: NormalizedBBox,
    seed: u64,
    result: EditResult,
}

#[derive(Debug)]
struct Session {
    image: Arc<Image>,
    turns: Vec<Turn>,
    edits: Vec<StoredEdit>,
}

/// Shared models and the session table.
pub struct AppState {
    placement: Arc<PlacementModel>,
    editor: Arc<EditorModel>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    max_side: u32,
    default_seed: u64,
}

impl AppState {
    pub fn new(placement: PlacementModel, editor: EditorModel, max_side: u32) -> touchedit_core::Result<Self> {
        if editor.config.conditioning != Conditioning::Box {
            return Err(Error::Config("the service needs a box-conditioned editor".into()));
        }
        Ok(Self {
            placement: Arc::new(placement),
            editor: Arc::new(editor),
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            max_side,
            default_seed: 0,
        })
    }

    /// Seed for edit requests that do not carry one.
    pub fn with_default_seed(mut self, seed: u64) -> Self {
        self.default_seed = seed;
        self
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions.read().expect("session table").get(id).cloned().ok_or_else(|| ApiError::not_found("session"))
    }
}

pub fn router(state: Arc<AppState>, max_upload_bytes: usize) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/placement", post(propose_placement))
        .route("/sessions/{id}/edits", post(apply_edit))
        .route("/sessions/{id}/edits/{eid}", get(get_edit))
        .layer(DefaultBodyLimit::max(max_upload_bytes))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    mut multipart: Multipart,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let mut bytes: Option<Bytes> = None;
    while let Some(field) =
        multipart.next_field().await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?
    {
        if field.name() == Some("image") || bytes.is_none() {
            let data = field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
            bytes = Some(data);
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing image field"))?;
    let image = Image::decode_png(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    if image.width().max(image.height()) > state.max_side {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image side exceeds {} pixels", state.max_side),
        ));
    }
    let id = format!("s{:06}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let created = SessionCreated { id: id.clone(), width: image.width(), height: image.height() };
    let session = Session { image: Arc::new(image), turns: Vec::new(), edits: Vec::new() };
    state.sessions.write().expect("session table").insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditSummary {
    pub id: usize,
    pub turn: usize,
    pub bbox: NormalizedBBox,
    pub seed: u64,
    pub url: String,
}

#[derive(Debug, Serialize)]
struct SessionView {
    id: String,
    width: u32,
    height: u32,
    turns: Vec<Turn>,
    edits: Vec<EditSummary>,
}

fn summary(session_id: &str, e: &StoredEdit) -> EditSummary {
    EditSummary {
        id: e.id,
        turn: e.turn,
        bbox: e.bbox,
        seed: e.seed,
        url: format!("/sessions/{session_id}/edits/{}", e.id),
    }
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let session = state.session(&id)?;
    let s = session.lock().expect("session lock");
    Ok(Json(SessionView {
        width: s.image.width(),
        height: s.image.height(),
        turns: s.turns.clone(),
        edits: s.edits.iter().map(|e| summary(&id, e)).collect(),
        id,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlacementRequest {
    pub instruction: String,
    pub touch: TouchPoint,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlacementResponse {
    pub turn: usize,
    pub reasoning: String,
    pub bbox: NormalizedBBox,
    pub fallback_used: bool,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> touchedit_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn propose_placement(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<PlacementRequest>,
) -> ApiResult<Json<PlacementResponse>> {
    let session = state.session(&id)?;
    let image = session.lock().expect("session lock").image.clone();
    req.touch.check_bounds(image.width(), image.height())?;
    let model = state.placement.clone();
    let (instruction, touch) = (req.instruction.clone(), req.touch);
    let result = blocking(move || predict_placement(&model, &image, &instruction, &touch)).await?;
    let mut s = session.lock().expect("session lock");
    let turn = s.turns.len();
    s.turns.push(Turn { turn, instruction: req.instruction, touch: req.touch, placement: result.clone() });
    Ok(Json(PlacementResponse {
        turn,
        reasoning: result.reasoning,
        bbox: result.bbox,
        fallback_used: result.fallback_used,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditRequestBody {
    pub turn: usize,
    /// Accepted box `[x_c, y_c, w, h]`, possibly adjusted by the user.
    pub bbox: [f64; 4],
    pub seed: Option<u64>,
}

async fn apply_edit(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<EditRequestBody>,
) -> ApiResult<(StatusCode, Json<EditSummary>)> {
    let session = state.session(&id)?;
    let [x, y, w, h] = req.bbox;
    let bbox = NormalizedBBox::new(x, y, w, h)?;
    let (image, instruction) = {
        let s = session.lock().expect("session lock");
        let turn = s.turns.get(req.turn).ok_or_else(|| ApiError::not_found("turn"))?;
        (s.image.clone(), turn.instruction.clone())
    };
    let editor = state.editor.clone();
    let seed = req.seed.unwrap_or(state.default_seed);
    let result = blocking(move || sample_edit(&editor, &image, &instruction, &bbox, seed)).await?;
    let mut s = session.lock().expect("session lock");
    let edit = StoredEdit { id: s.edits.len(), turn: req.turn, bbox, seed, result };
    let out = summary(&id, &edit);
    s.edits.push(edit);
    Ok((StatusCode::CREATED, Json(out)))
}

#[derive(Debug, Default, Deserialize)]
struct EditQuery {
    kind: Option<String>,
}

/// Blended image by default; `?kind=mask` or `?kind=edited` for the others.
async fn get_edit(
    State(state): State<Arc<AppState>>,
    Path((id, eid)): Path<(String, usize)>,
    Query(q): Query<EditQuery>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let result = {
        let s = session.lock().expect("session lock");
        s.edits.get(eid).ok_or_else(|| ApiError::not_found("edit"))?.result.clone()
    };
    let png = match q.kind.as_deref().unwrap_or("blended") {
        "blended" => result.blended_image.encode_png()?,
        "edited" => result.edited_image.encode_png()?,
        "mask" => result.instance_mask.encode_png()?,
        other => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown kind '{other}'"))),
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
