use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lelsd_core::bank::DirectionBank;
use lelsd_core::edit::{calibrate_alpha, metric_by_name, CalibrationOptions, EditSession, PixelL2, SessionExport};
use lelsd_core::latent::{EditOp, LatentCode, LatentDirection, LayerRange};
use lelsd_core::segmentation::PartLabel;
use lelsd_core::trainer::sample_latents;
use lelsd_core::LelsdError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::backend::Backends;
use crate::render::png_base64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.to_string(), message: message.into() }
    }

    fn unknown_session(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session `{id}`"))
    }

    fn unknown_direction(name: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "UnknownDirection", format!("no direction `{name}` in the loaded banks"))
    }

    fn malformed(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "MalformedBody", message)
    }
}

impl From<LelsdError> for ApiError {
    fn from(e: LelsdError) -> Self {
        let status = match &e {
            LelsdError::SpaceMismatch(_) | LelsdError::FingerprintMismatch { .. } => StatusCode::CONFLICT,
            LelsdError::InvalidEdit(_)
            | LelsdError::InvalidInput(_)
            | LelsdError::ShapeMismatch(_)
            | LelsdError::UnknownPart(_)
            | LelsdError::UnsupportedVersion(_)
            | LelsdError::MalformedBank(_) => StatusCode::BAD_REQUEST,
            LelsdError::CalibrationOutOfRange(_) | LelsdError::NonMonotoneDistance(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            LelsdError::UnsupportedCapability(_) | LelsdError::TrainingDiverged(_) | LelsdError::Io(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

struct LoadedDirection {
    direction: Arc<LatentDirection>,
    final_score: f64,
}

/// Shared state of the editing service: one backend, the directions of the
/// loaded banks and the live sessions. Sessions are in memory only.
pub struct AppState {
    backends: Backends,
    directions: BTreeMap<String, LoadedDirection>,
    sessions: Mutex<HashMap<String, Arc<Mutex<EditSession>>>>,
    calibration: CalibrationOptions,
}

impl AppState {
    /// Fails if a bank was trained against another generator or space, or if
    /// two banks share a direction name.
    pub fn new(backends: Backends, banks: &[DirectionBank]) -> lelsd_core::Result<Self> {
        let fingerprint = backends.generator.fingerprint();
        let mut directions = BTreeMap::new();
        for bank in banks {
            bank.ensure_fingerprint(&fingerprint)?;
            backends.generator.space().ensure_same(&bank.space)?;
            for entry in bank.entries() {
                let direction = Arc::new(bank.direction(&entry.name)?);
                let loaded = LoadedDirection { direction, final_score: entry.final_score };
                if directions.insert(entry.name.clone(), loaded).is_some() {
                    return Err(LelsdError::InvalidInput(format!("direction `{}` appears in two banks", entry.name)));
                }
            }
        }
        Ok(AppState { backends, directions, sessions: Mutex::new(HashMap::new()), calibration: Default::default() })
    }

    fn direction(&self, name: &str) -> Result<Arc<LatentDirection>, ApiError> {
        self.directions.get(name).map(|d| d.direction.clone()).ok_or_else(|| ApiError::unknown_direction(name))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<EditSession>>, ApiError> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::unknown_session(id))
    }

    fn insert(&self, session: EditSession) -> String {
        let id = session.session_id().to_string();
        self.sessions.lock().unwrap().insert(id.clone(), Arc::new(Mutex::new(session)));
        id
    }

    fn render(&self, session: &EditSession) -> Result<String, ApiError> {
        Ok(png_base64(&session.render(self.backends.generator.as_ref())?))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/import", post(import_session))
        .route("/sessions/{id}", get(export_session))
        .route("/sessions/{id}/image", get(session_image))
        .route("/sessions/{id}/edits", post(push_edit).delete(pop_edit))
        .route("/sessions/{id}/calibrate", post(calibrate))
        .route("/directions", get(list_directions))
        .route("/parts", get(list_parts))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("lelsd listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn parse_body<T: DeserializeOwned>(body: &Bytes, empty_default: Option<&str>) -> Result<T, ApiError> {
    let text = match (body.is_empty(), empty_default) {
        (true, Some(default)) => default.as_bytes(),
        _ => body.as_ref(),
    };
    serde_json::from_slice(text).map_err(|e| ApiError::malformed(format!("request body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct SessionCreated {
    session_id: String,
    seed: Option<u64>,
    image: String,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<SessionCreated> {
    let req: CreateSession = parse_body(&body, Some("{}"))?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let space = state.backends.generator.space();
    let code: LatentCode = sample_latents(space, 1, seed).remove(0);
    let session =
        EditSession::new(uuid::Uuid::new_v4().simple().to_string(), code, state.backends.generator.fingerprint());
    let image = state.render(&session)?;
    let session_id = state.insert(session);
    Ok(Json(SessionCreated { session_id, seed: Some(seed), image }))
}

async fn import_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<SessionCreated> {
    let export: SessionExport = parse_body(&body, None)?;
    let fingerprint = state.backends.generator.fingerprint();
    if export.backend_fingerprint != fingerprint {
        return Err(LelsdError::FingerprintMismatch { expected: fingerprint, found: export.backend_fingerprint }.into());
    }
    state.backends.generator.space().ensure_same(&export.base_code.space)?;
    for edit in &export.edits {
        state.direction(&edit.direction)?;
    }
    let mut export = export;
    export.session_id = uuid::Uuid::new_v4().simple().to_string();
    let session = export.restore(|name| state.direction(name).ok())?;
    let image = state.render(&session)?;
    let session_id = state.insert(session);
    Ok(Json(SessionCreated { session_id, seed: None, image }))
}

async fn export_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionExport> {
    let session = state.session(&id)?;
    let export = session.lock().unwrap().export();
    Ok(Json(export))
}

#[derive(Debug, Serialize)]
struct Rendered {
    image: String,
    stack_depth: usize,
}

async fn session_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Rendered> {
    let session = state.session(&id)?;
    let session = session.lock().unwrap();
    Ok(Json(Rendered { image: state.render(&session)?, stack_depth: session.edit_stack().len() }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PushEdit {
    direction: String,
    alpha: f64,
}

async fn push_edit(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Rendered> {
    let session = state.session(&id)?;
    let req: PushEdit = parse_body(&body, None)?;
    let direction = state.direction(&req.direction)?;
    let mut session = session.lock().unwrap();
    session.push_edit(EditOp::new(direction, req.alpha))?;
    match state.render(&session) {
        Ok(image) => Ok(Json(Rendered { image, stack_depth: session.edit_stack().len() })),
        Err(e) => {
            session.pop_edit();
            Err(e)
        }
    }
}

/// Undo. Popping an empty stack is a no-op that returns the base render.
async fn pop_edit(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Rendered> {
    let session = state.session(&id)?;
    let mut session = session.lock().unwrap();
    session.pop_edit();
    Ok(Json(Rendered { image: state.render(&session)?, stack_depth: session.edit_stack().len() }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrateRequest {
    direction: String,
    distance: f64,
    metric: Option<String>,
}

#[derive(Debug, Serialize)]
struct Calibrated {
    alpha_neg: f64,
    alpha_pos: f64,
    metric: String,
}

async fn calibrate(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Calibrated> {
    let session = state.session(&id)?;
    let req: CalibrateRequest = parse_body(&body, None)?;
    let direction = state.direction(&req.direction)?;
    let metric = match &req.metric {
        Some(name) => metric_by_name(name)?,
        None => Box::new(PixelL2),
    };
    let session = session.lock().unwrap();
    let (alpha_neg, alpha_pos) = calibrate_alpha(
        &session,
        &direction,
        req.distance,
        metric.as_ref(),
        state.backends.generator.as_ref(),
        &state.calibration,
    )?;
    Ok(Json(Calibrated { alpha_neg, alpha_pos, metric: metric.name().to_string() }))
}

#[derive(Debug, Serialize)]
struct DirectionSummary {
    name: String,
    part: PartLabel,
    layer_range: LayerRange,
    final_score: f64,
}

async fn list_directions(State(state): State<Arc<AppState>>) -> Json<Vec<DirectionSummary>> {
    let list = state
        .directions
        .iter()
        .map(|(name, d)| DirectionSummary {
            name: name.clone(),
            part: d.direction.part().clone(),
            layer_range: d.direction.layer_range(),
            final_score: d.final_score,
        })
        .collect();
    Json(list)
}

async fn list_parts(State(state): State<Arc<AppState>>) -> Json<Vec<PartLabel>> {
    Json(state.backends.segmenter.vocabulary().to_vec())
}
