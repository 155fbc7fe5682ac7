//! HTTP API for annotation tasks, adjudication, review and dataset stats.
//!
//! Every request that acts on the dataset carries the annotator identity in
//! the [`ANNOTATOR_HEADER`] header. Errors are JSON objects
//! `{"error": ..., "field": ...}` where `field` is a dotted path into the
//! request (or `header.<name>`) when one applies.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::Serialize;
use serde_json::{json, Map, Value};

use hfalign_core::store::ManualRemoval;
use hfalign_core::tokenizer::question_text;
use hfalign_core::{
    compute_stats, Annotation, Annotator, CoreError, Dimension, ExperimentConfig, IdGen, Label, Resolution,
    ReviewDecision, StageTag, Store, VideoShape, VideoSource,
};
use hfalign_pipeline::correction::progress;

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

/// Source of "now" for leases and audit timestamps.
pub trait TimeSource: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemTime;

impl TimeSource for SystemTime {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualTime(Mutex<DateTime<Utc>>);

impl ManualTime {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().expect("clock lock") += by;
    }
}

impl TimeSource for ManualTime {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskLease {
    pub task_id: String,
    pub video_id: String,
    pub holder: String,
    pub expires_at: DateTime<Utc>,
}

pub struct AppState {
    pub store: Arc<Store>,
    pub cfg: ExperimentConfig,
    pub time: Arc<dyn TimeSource>,
    leases: Mutex<HashMap<String, TaskLease>>,
    ids: Mutex<IdGen>,
}

impl AppState {
    pub fn new(store: Arc<Store>, cfg: ExperimentConfig, time: Arc<dyn TimeSource>) -> Self {
        Self { store, cfg, time, leases: Mutex::new(HashMap::new()), ids: Mutex::new(IdGen::from_entropy()) }
    }

    fn lease_duration(&self) -> Duration {
        Duration::minutes(self.cfg.service.lease_minutes as i64)
    }

    fn timestamp(&self) -> String {
        self.time.now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    }

    fn persist(&self) -> Result<(), ApiError> {
        self.store.flush().map_err(ApiError::from)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/annotations", post(submit_annotations))
        .route("/adjudications/next", get(next_adjudication))
        .route("/adjudications/{id}", post(resolve_adjudication))
        .route("/reviews/next", get(next_review))
        .route("/reviews/{id}", post(decide_review))
        .route("/removals", post(request_removal))
        .route("/stats", get(stats))
        .route("/videos/{id}", get(video))
        .route("/audit", get(audit))
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

// --- errors ----------------------------------------------------------------

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), field: None }
    }

    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, message: message.into(), field: Some(field.into()) }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::NotFound { .. } => StatusCode::NOT_FOUND,
            CoreError::Conflict { .. } => StatusCode::CONFLICT,
            CoreError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<hfalign_pipeline::PipelineError> for ApiError {
    fn from(e: hfalign_pipeline::PipelineError) -> Self {
        match e {
            hfalign_pipeline::PipelineError::Core(c) => c.into(),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = Value::String(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn annotator(headers: &HeaderMap) -> ApiResult<String> {
    headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .ok_or_else(|| ApiError {
            status: StatusCode::BAD_REQUEST,
            message: format!("missing {ANNOTATOR_HEADER} header"),
            field: Some(format!("header.{ANNOTATOR_HEADER}")),
        })
}

fn json_object(body: &Bytes) -> ApiResult<Map<String, Value>> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::invalid("", "request body must be a JSON object")),
        Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}"))),
    }
}

fn string_field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> ApiResult<&'a str> {
    obj.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::invalid(path, format!("`{path}` must be a string")))
}

// --- tasks ---------------------------------------------------------------

const TASK_PREFIX: &str = "task-";

fn task_id(video_id: &str) -> String {
    format!("{TASK_PREFIX}{video_id}")
}

async fn next_task(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Response> {
    let holder = annotator(&headers)?;
    let now = state.time.now();
    let mut leases = state.leases.lock().expect("lease lock");
    leases.retain(|_, l| l.expires_at > now);
    let lease = match leases.values().find(|l| l.holder == holder) {
        Some(l) => l.clone(),
        None => {
            let t = state.store.read();
            let annotated: HashSet<&str> = t.annotations.values().map(|a| a.video_id.as_str()).collect();
            let leased: HashSet<&str> = leases.values().map(|l| l.video_id.as_str()).collect();
            let Some(video) = t.videos.values().find(|v| {
                v.source == VideoSource::Synthesized && !annotated.contains(v.id.as_str()) && !leased.contains(v.id.as_str())
            }) else {
                return Ok(StatusCode::NO_CONTENT.into_response());
            };
            let lease = TaskLease {
                task_id: task_id(&video.id),
                video_id: video.id.clone(),
                holder,
                expires_at: now + state.lease_duration(),
            };
            leases.insert(lease.task_id.clone(), lease.clone());
            lease
        }
    };
    drop(leases);
    let video = state.store.get_video(&lease.video_id)?;
    let prompt = state.store.get_prompt(&video.prompt_id)?;
    let questions: Vec<Value> = Dimension::ALL
        .iter()
        .map(|d| json!({ "dimension": d.as_str(), "question": question_text(*d) }))
        .collect();
    Ok(Json(json!({
        "task_id": lease.task_id,
        "video_id": video.id,
        "prompt_id": prompt.id,
        "caption": prompt.caption,
        "shape": video.shape(),
        "frames": video.frames,
        "questions": questions,
        "lease_expires_at": lease.expires_at.to_rfc3339(),
    }))
    .into_response())
}

async fn submit_annotations(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let holder = annotator(&headers)?;
    let obj = json_object(&body)?;
    let task = string_field(&obj, "task_id", "task_id")?.to_string();
    let per_dim = obj
        .get("annotations")
        .and_then(Value::as_object)
        .ok_or_else(|| ApiError::invalid("annotations", "`annotations` must be an object keyed by dimension"))?;
    if let Some(unknown) = per_dim.keys().find(|k| k.parse::<Dimension>().is_err()) {
        return Err(ApiError::invalid(format!("annotations.{unknown}"), format!("unknown dimension `{unknown}`")));
    }
    let mut parsed = Vec::with_capacity(3);
    for d in Dimension::ALL {
        let path = format!("annotations.{}", d.as_str());
        let entry = per_dim
            .get(d.as_str())
            .and_then(Value::as_object)
            .ok_or_else(|| ApiError::invalid(&path, format!("`{path}` must be an object with label and reason")))?;
        let label_path = format!("{path}.label");
        let label: Label = string_field(entry, "label", &label_path)?
            .parse()
            .map_err(|_| ApiError::invalid(&label_path, "label must be one of Good, Normal, Bad"))?;
        let reason_path = format!("{path}.reason");
        let reason = string_field(entry, "reason", &reason_path)?.trim();
        if reason.is_empty() {
            return Err(ApiError::invalid(&reason_path, "reason must be non-empty"));
        }
        parsed.push((d, label, reason.to_string()));
    }

    let video_id = task
        .strip_prefix(TASK_PREFIX)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("task `{task}` not found")))?;
    if state.store.get_video(video_id).is_err() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("task `{task}` not found")));
    }
    let now = state.time.now();
    let mut leases = state.leases.lock().expect("lease lock");
    let held = leases.get(&task).is_some_and(|l| l.holder == holder && l.expires_at > now);
    if !held {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("lease on task `{task}` expired or is not held by `{holder}`")));
    }
    let records: Vec<Annotation> = {
        let mut ids = state.ids.lock().expect("id lock");
        parsed
            .into_iter()
            .map(|(dimension, label, reason)| Annotation {
                id: ids.next("ann"),
                video_id: video_id.to_string(),
                dimension,
                label,
                reason,
                annotator: Annotator::Human,
                stage_tag: StageTag::Raw,
                annotator_id: Some(holder.clone()),
                note: None,
            })
            .collect()
    };
    let ids: Vec<String> = records.iter().map(|a| a.id.clone()).collect();
    state.store.insert_annotations(records)?;
    leases.remove(&task);
    drop(leases);
    state.persist()?;
    Ok((StatusCode::CREATED, Json(json!({ "task_id": task, "annotation_ids": ids }))).into_response())
}

// --- adjudication and review ------------------------------------------------

async fn next_adjudication(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Response> {
    annotator(&headers)?;
    Ok(match state.store.pending_adjudications().into_iter().next() {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn resolve_adjudication(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let actor = annotator(&headers)?;
    let obj = json_object(&body)?;
    let resolution = match string_field(&obj, "resolution", "resolution")? {
        "keep_human" => Resolution::KeepHuman,
        "keep_model" => Resolution::KeepModel,
        _ => return Err(ApiError::invalid("resolution", "resolution must be keep_human or keep_model")),
    };
    let item = state.store.resolve_adjudication(&id, resolution, &actor, &state.timestamp())?;
    state.persist()?;
    Ok(Json(item).into_response())
}

async fn next_review(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Response> {
    annotator(&headers)?;
    Ok(match state.store.pending_reviews().into_iter().next() {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn decide_review(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let actor = annotator(&headers)?;
    let obj = json_object(&body)?;
    let decision = match string_field(&obj, "decision", "decision")? {
        "accept" => ReviewDecision::Accept,
        "reject" => ReviewDecision::Reject,
        _ => return Err(ApiError::invalid("decision", "decision must be accept or reject")),
    };
    let item = state.store.decide_review(&id, decision, &actor, &state.timestamp())?;
    state.persist()?;
    Ok(Json(item).into_response())
}

async fn request_removal(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let actor = annotator(&headers)?;
    let obj = json_object(&body)?;
    let annotation_id = string_field(&obj, "annotation_id", "annotation_id")?.to_string();
    let note = obj.get("note").and_then(Value::as_str).unwrap_or_default().to_string();
    let a = state.store.get_annotation(&annotation_id)?;
    if a.stage_tag != StageTag::Raw {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("annotation `{annotation_id}` already passed coarse filtering ({})", a.stage_tag.as_str()),
        ));
    }
    state.store.request_removal(ManualRemoval { annotation_id: annotation_id.clone(), note, actor })?;
    state.persist()?;
    Ok((StatusCode::CREATED, Json(json!({ "annotation_id": annotation_id }))).into_response())
}

// --- read-only --------------------------------------------------------------

async fn stats(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let correction = progress(&state.store, state.cfg.correction.rounds)?;
    Ok(Json(json!({ "dataset": compute_stats(&state.store), "correction": correction })).into_response())
}

async fn video(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let v = state.store.get_video(&id)?;
    let shape: VideoShape = v.shape();
    Ok(Json(json!({ "id": v.id, "prompt_id": v.prompt_id, "source": v.source, "shape": shape, "frames": v.frames }))
        .into_response())
}

async fn audit(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(state.store.audit_log()))
}
