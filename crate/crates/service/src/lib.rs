//! HTTP session service for interactive refinement.
//!
//! Routes:
//!
//! - `POST /sessions` creates a session from a manifest path or an inline
//!   synthetic spec, with optional engine and neighborhood overrides.
//! - `POST /sessions/{id}/annotations` queues a batch of `{vertex, label}`.
//! - `POST /sessions/{id}/step` runs `count` iterations (409 if one is running).
//! - `GET /sessions/{id}/state?include=predictions,beliefs,metrics`
//! - `GET /sessions/{id}/events` streams the event log, then live events.
//! - `GET /sessions/{id}/log` exports the event log as JSON.
//! - `GET /sessions/{id}/thumbnails/{*path}` serves patch thumbnails.

pub mod session;

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, Request, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use histocrf_core::experiments::RunConfig;
use histocrf_core::io::{load_dataset, DatasetManifest};
use histocrf_core::synthetic::{synthesize, SyntheticSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;
use tower::ServiceExt;
use tower_http::services::ServeDir;

pub use session::{replay_events, EventKind, Session, SessionEvent, Status};

const MAX_STEP_COUNT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Largest dataset (patches) a session may hold.
    pub max_n: usize,
    pub max_sessions: usize,
    /// Full beliefs are returned only up to this many N×L cells; larger
    /// sessions get the per-vertex top three.
    pub max_belief_cells: usize,
    pub defaults: RunConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_n: 100_000,
            max_sessions: 32,
            max_belief_cells: 1_000_000,
            defaults: RunConfig::default(),
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("sessions lock").get(id).cloned()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<histocrf_core::Error> for ApiError {
    fn from(e: histocrf_core::Error) -> Self {
        let status = if e.is_validation() {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/annotations", post(annotate))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/state", get(state_document))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/log", get(event_log))
        .route("/sessions/{id}/thumbnails/{*path}", get(thumbnail))
        .with_state(state)
}

/// Serves the router until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub manifest_path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Partial `EngineConfig` merged over the service defaults.
    #[serde(default)]
    pub engine: Option<Value>,
    /// Partial `NeighborhoodParams` merged over the service defaults.
    #[serde(default)]
    pub neighborhood: Option<Value>,
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn overridden<T: Clone + Serialize + for<'de> Deserialize<'de>>(base: &T, patch: Option<&Value>) -> ApiResult<T> {
    let Some(patch) = patch else {
        return Ok(base.clone());
    };
    let mut value = serde_json::to_value(base).map_err(|e| ApiError::internal(e.to_string()))?;
    merge(&mut value, patch);
    serde_json::from_value(value)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid config override: {e}")))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(body): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let config = RunConfig {
        engine: overridden(&state.config.defaults.engine, body.engine.as_ref())?,
        neighborhood: overridden(&state.config.defaults.neighborhood, body.neighborhood.as_ref())?,
    };
    let max_n = state.config.max_n;
    let too_large = |n: usize| {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("dataset has {n} patches, limit is {max_n}"),
        )
    };
    let source = match (body.manifest_path, body.synthetic) {
        (Some(path), None) => {
            let manifest = DatasetManifest::read(&path)?;
            if manifest.num_patches > max_n {
                return Err(too_large(manifest.num_patches));
            }
            Source::Manifest(path)
        }
        (None, Some(spec)) => {
            spec.validate()?;
            if spec.num_patches() > max_n {
                return Err(too_large(spec.num_patches()));
            }
            Source::Synthetic(spec)
        }
        _ => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "exactly one of manifest_path and synthetic is required",
            ))
        }
    };
    {
        let sessions = state.sessions.read().expect("sessions lock");
        if sessions.len() >= state.config.max_sessions {
            return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "session limit reached"));
        }
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = tokio::task::spawn_blocking(move || -> histocrf_core::Result<Session> {
        let dataset = match source {
            Source::Manifest(path) => load_dataset(path)?,
            Source::Synthetic(spec) => synthesize(&spec)?.dataset,
        };
        Session::new(id, Arc::new(dataset), config)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let session = Arc::new(session);
    {
        let mut sessions = state.sessions.write().expect("sessions lock");
        if sessions.len() >= state.config.max_sessions {
            return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "session limit reached"));
        }
        sessions.insert(session.id.clone(), session.clone());
    }
    tracing::info!(id = %session.id, n = session.num_vertices(), "session created");
    let snapshot = session.snapshot();
    let mut doc = json!({
        "session_id": session.id,
        "N": session.num_vertices(),
        "L": session.num_classes(),
        "class_names": session.dataset.class_names(),
    });
    if let Some((accuracy, _)) = session.accuracy(&snapshot) {
        doc["zero_shot_accuracy"] = json!(accuracy);
    }
    Ok((StatusCode::CREATED, Json(doc)))
}

enum Source {
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct AnnotationEntry {
    pub vertex: usize,
    pub label: usize,
}

async fn annotate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(batch): Json<Vec<AnnotationEntry>>,
) -> ApiResult<Json<Value>> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let batch: Vec<(usize, usize)> = batch.iter().map(|e| (e.vertex, e.label)).collect();
    let (accepted, overridden) = session
        .submit_annotations(&batch)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(Json(json!({ "accepted": accepted, "overridden": overridden })))
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct StepRequest {
    count: usize,
}

impl Default for StepRequest {
    fn default() -> Self {
        Self { count: 1 }
    }
}

async fn step(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<StepRequest>>,
) -> ApiResult<Json<Value>> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let count = body.map(|b| b.0.count).unwrap_or(1);
    if count == 0 || count > MAX_STEP_COUNT {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("count must lie in 1..={MAX_STEP_COUNT}"),
        ));
    }
    if !session.begin_step() {
        return Err(ApiError::new(StatusCode::CONFLICT, "a step is already running"));
    }
    let summary = tokio::task::spawn_blocking(move || session.run_steps(count))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(json!({
        "iterations_run": summary.iterations_run,
        "max_delta": summary.max_delta,
        "seconds_per_iteration": summary.seconds_per_iteration,
    })))
}

#[derive(Debug, Default, Deserialize)]
struct StateQuery {
    include: Option<String>,
}

async fn state_document(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<StateQuery>,
) -> ApiResult<Json<Value>> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let include: Vec<&str> = query
        .include
        .as_deref()
        .unwrap_or("predictions")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let snapshot = session.snapshot();
    let mut doc = json!({
        "iteration": snapshot.beliefs.iteration(),
        "status": session.status(),
        "num_annotations": snapshot.annotations.len(),
        "pending_annotations": session.pending_len(),
    });
    for part in include {
        match part {
            "predictions" => doc["predictions"] = json!(snapshot.predictions),
            "beliefs" => doc["beliefs"] = beliefs_json(&snapshot.beliefs, state.config.max_belief_cells),
            "metrics" => {
                let mut metrics = json!({ "history": snapshot.history });
                if let Some((accuracy, excl)) = session.accuracy(&snapshot) {
                    metrics["accuracy"] = json!(accuracy);
                    metrics["accuracy_excl_annotated"] = json!(excl);
                }
                doc["metrics"] = metrics;
            }
            "annotations" => {
                doc["annotations"] = json!(snapshot
                    .annotations
                    .iter()
                    .map(|(vertex, label)| json!({ "vertex": vertex, "label": label }))
                    .collect::<Vec<_>>())
            }
            other => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    format!("unknown include {other:?}"),
                ))
            }
        }
    }
    Ok(Json(doc))
}

fn beliefs_json(beliefs: &histocrf_core::Beliefs, max_cells: usize) -> Value {
    let view = beliefs.view();
    if beliefs.num_vertices() * beliefs.num_classes() <= max_cells {
        let rows: Vec<Vec<f64>> = view.outer_iter().map(|r| r.to_vec()).collect();
        return json!({ "truncated": false, "rows": rows });
    }
    let top: Vec<Vec<(usize, f64)>> = view
        .outer_iter()
        .map(|r| {
            let mut pairs: Vec<(usize, f64)> = r.iter().copied().enumerate().collect();
            pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            pairs.truncate(3);
            pairs
        })
        .collect();
    json!({ "truncated": true, "top": top })
}

fn sse_event(event: &SessionEvent) -> Result<Event, Infallible> {
    Ok(Event::default()
        .id(event.seq.to_string())
        .event(event.kind.name())
        .json_data(event)
        .expect("events serialize"))
}

async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let (history, receiver) = session.subscribe();
    let next_seq = history.len() as u64;
    let replayed = stream::iter(history.iter().map(sse_event).collect::<Vec<_>>());
    let live = stream::unfold((receiver, next_seq), |(mut rx, next)| async move {
        loop {
            match rx.recv().await {
                Ok(event) if event.seq < next => continue,
                Ok(event) => {
                    let item = sse_event(&event);
                    return Some((item, (rx, event.seq + 1)));
                }
                // A slow client lost events; close so it reconnects and replays.
                Err(RecvError::Lagged(_)) | Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(replayed.chain(live)).keep_alive(KeepAlive::default()))
}

async fn event_log(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<SessionEvent>>> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(session.events()))
}

async fn thumbnail(
    State(state): State<Arc<AppState>>,
    Path((id, path)): Path<(String, String)>,
    request: Request,
) -> ApiResult<Response> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let dir = session
        .dataset
        .thumbnails_dir
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "session has no thumbnails"))?;
    let (mut parts, body) = request.into_parts();
    parts.uri = format!("/{path}")
        .parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "bad thumbnail path"))?;
    let response = ServeDir::new(dir)
        .oneshot(Request::from_parts(parts, body))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(response.into_response())
}
