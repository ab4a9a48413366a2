//! Local HTTP daemon: run lifecycle, lock-step sessions, human actions,
//! event streams and telemetry export. Paths and documents are listed in
//! `docs/api.md`.

mod events;
mod run;
mod session;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use mosaic_envs::{Task, TASKS};
use serde::Deserialize;
use serde_json::{json, Map, Value};

pub use events::{Event, EventLog};
use run::RunEntry;
use session::SessionEntry;

use crate::evaluation::{run_id_for, DEFAULT_MAX_REPLICAS};
use crate::operator::{duplicate_keys, BindOptions, RunConfig};
use crate::telemetry::{export_jsonl, query, QueryFilter, Stream, MANIFEST_FILE};

pub const DEFAULT_PORT: u16 = 7461;

/// `MOSAIC_HOME` when set, else `./runs`.
pub fn default_runs_root() -> PathBuf {
    std::env::var_os("MOSAIC_HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn default_addr() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT))
}

#[derive(Clone)]
pub struct DaemonConfig {
    pub runs_root: PathBuf,
    pub bind: BindOptions,
    pub max_replicas: usize,
    pub frame_history: usize,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        DaemonConfig {
            runs_root: default_runs_root(),
            bind: BindOptions::default(),
            max_replicas: DEFAULT_MAX_REPLICAS,
            frame_history: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Start,
    Step,
    Pause,
    Resume,
    Stop,
}

impl Verb {
    pub fn parse(s: &str) -> Option<Verb> {
        Some(match s {
            "start" => Verb::Start,
            "step" => Verb::Step,
            "pause" => Verb::Pause,
            "resume" => Verb::Resume,
            "stop" => Verb::Stop,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Start => "start",
            Verb::Step => "step",
            Verb::Pause => "pause",
            Verb::Resume => "resume",
            Verb::Stop => "stop",
        }
    }
}

/// Error document: `{"error": code, "message": ..}` plus extra fields.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: Map<String, Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        let mut body = Map::new();
        body.insert("error".into(), json!(code));
        body.insert("message".into(), json!(message.into()));
        ApiError { status, body }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn validation(errors: Vec<(String, String)>) -> Self {
        let list: Vec<Value> = errors.iter().map(|(p, m)| json!({"path": p, "message": m})).collect();
        ApiError::bad_request("validation", "document failed validation").with("errors", Value::Array(list))
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::CONFLICT, code, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn gone(id: &str) -> Self {
        ApiError::new(StatusCode::GONE, "gone", format!("`{id}` is no longer running"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.body.insert(key.into(), value);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(Value::Object(self.body))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok(doc: Value) -> ApiResult {
    Ok(Json(doc).into_response())
}

struct Inner {
    cfg: DaemonConfig,
    runs: Mutex<BTreeMap<String, Arc<RunEntry>>>,
    sessions: Mutex<BTreeMap<String, Arc<SessionEntry>>>,
    next_session: AtomicU64,
}

/// Shared daemon state. Cheap to clone.
#[derive(Clone)]
pub struct Daemon {
    inner: Arc<Inner>,
}

impl Daemon {
    pub fn new(cfg: DaemonConfig) -> Self {
        Daemon {
            inner: Arc::new(Inner {
                cfg,
                runs: Mutex::new(BTreeMap::new()),
                sessions: Mutex::new(BTreeMap::new()),
                next_session: AtomicU64::new(1),
            }),
        }
    }

    pub fn config(&self) -> &DaemonConfig {
        &self.inner.cfg
    }

    fn run(&self, id: &str) -> Result<Arc<RunEntry>, ApiError> {
        self.inner
            .runs
            .lock()
            .expect("runs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown run `{id}`")))
    }

    fn session(&self, id: &str) -> Result<Arc<SessionEntry>, ApiError> {
        self.inner
            .sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }
}

pub fn router(daemon: Daemon) -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/envs", get(envs))
        .route("/api/v1/runs", post(create_run).get(list_runs))
        .route("/api/v1/runs/{id}", get(get_run))
        .route("/api/v1/runs/{id}/events", get(run_events))
        .route("/api/v1/runs/{id}/telemetry/{stream}", get(run_telemetry))
        .route("/api/v1/runs/{id}/aggregates", get(run_aggregates))
        .route("/api/v1/runs/{id}/{verb}", post(run_control))
        .route("/api/v1/sessions", post(create_session).get(list_sessions))
        .route("/api/v1/sessions/{id}", get(get_session))
        .route("/api/v1/sessions/{id}/events", get(session_events))
        .route("/api/v1/sessions/{id}/frames", get(session_frames))
        .route("/api/v1/sessions/{id}/human", post(submit_human_action))
        .route("/api/v1/sessions/{id}/telemetry/{stream}", get(session_telemetry))
        .route("/api/v1/sessions/{id}/{verb}", post(session_control))
        .with_state(daemon)
}

/// Serves until the process exits.
pub async fn serve(listener: tokio::net::TcpListener, daemon: Daemon) -> std::io::Result<()> {
    axum::serve(listener, router(daemon)).await
}

async fn health() -> ApiResult {
    ok(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")}))
}

fn keymap(task: Task) -> Value {
    match task {
        Task::Corridor => json!({" ": "stay", "ArrowRight": "forward", "ArrowLeft": "back"}),
        Task::TeamTag => {
            json!({" ": "stay", "ArrowUp": "up", "ArrowDown": "down", "ArrowLeft": "left", "ArrowRight": "right"})
        }
    }
}

async fn envs() -> ApiResult {
    let list: Vec<Value> = TASKS
        .iter()
        .map(|id| {
            let task = Task::from_id(id).expect("built-in task");
            let space = task.action_space();
            json!({
                "task": id,
                "slots": task.slots(),
                "teams": task.teams(),
                "horizon": task.horizon(),
                "actions": space.labels,
                "null_action": space.null_action,
                "keymap": keymap(task),
            })
        })
        .collect();
    ok(json!({"envs": list}))
}

fn config_errors(e: crate::operator::ConfigError, prefix: &str) -> ApiError {
    ApiError::validation(
        e.errors
            .into_iter()
            .map(|f| {
                let path = match (prefix.is_empty(), f.path.is_empty()) {
                    (true, _) => f.path,
                    (false, true) => prefix.to_string(),
                    (false, false) => format!("{prefix}.{}", f.path),
                };
                (path, f.message)
            })
            .collect(),
    )
}

async fn create_run(State(d): State<Daemon>, body: Bytes) -> ApiResult {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("validation", "body is not UTF-8"))?;
    let config = RunConfig::from_json(text).map_err(|e| config_errors(e, ""))?;
    let seed = config.seed.unwrap_or(0);
    let episodes = config.episodes.unwrap_or(1);
    let run_id = run_id_for(&config, seed, episodes);
    let mut runs = d.inner.runs.lock().expect("runs lock");
    if let Some(old) = runs.get(&run_id) {
        let state = old.state();
        if !state.is_terminal() && state != run::RunState::Created {
            return Err(ApiError::conflict("conflict", format!("run `{run_id}` is {}", state.name()))
                .with("run_id", json!(run_id)));
        }
        old.retire();
    }
    let entry = RunEntry::new(&run_id, config, &d.inner.cfg);
    let doc = entry.status_doc();
    runs.insert(run_id, entry);
    Ok((StatusCode::CREATED, Json(doc)).into_response())
}

async fn list_runs(State(d): State<Daemon>) -> ApiResult {
    let runs: Vec<Value> = d.inner.runs.lock().expect("runs lock").values().map(|r| r.status_doc()).collect();
    ok(json!({"runs": runs}))
}

async fn get_run(State(d): State<Daemon>, Path(id): Path<String>) -> ApiResult {
    ok(d.run(&id)?.status_doc())
}

async fn run_control(State(d): State<Daemon>, Path((id, verb)): Path<(String, String)>) -> ApiResult {
    let verb = Verb::parse(&verb).ok_or_else(|| ApiError::not_found(format!("unknown verb `{verb}`")))?;
    ok(d.run(&id)?.control(verb)?)
}

#[derive(Debug, Default, Deserialize)]
struct EventQuery {
    after: Option<u64>,
    follow: Option<bool>,
}

fn event_stream(log: &Arc<EventLog>, q: &EventQuery, headers: &HeaderMap) -> Response {
    let after = q
        .after
        .or_else(|| headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.trim().parse().ok()));
    let follow = q.follow.unwrap_or(true);
    let stream = log.stream(after.unwrap_or(0), follow).map(|e| {
        let line = e.to_line();
        Ok::<_, Infallible>(SseEvent::default().id(e.seq.to_string()).event(e.kind.clone()).data(line.trim_end()))
    });
    Sse::new(stream).keep_alive(KeepAlive::default()).into_response()
}

async fn run_events(
    State(d): State<Daemon>,
    Path(id): Path<String>,
    Query(q): Query<EventQuery>,
    headers: HeaderMap,
) -> ApiResult {
    Ok(event_stream(&d.run(&id)?.events, &q, &headers))
}

fn telemetry(dir: PathBuf, stream: &str) -> ApiResult {
    let stream = Stream::parse(stream).ok_or_else(|| ApiError::not_found(format!("unknown stream `{stream}`")))?;
    let bytes = export_jsonl(&dir, stream).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(bytes)).into_response())
}

fn run_dir(d: &Daemon, id: &str) -> Result<PathBuf, ApiError> {
    let dir = d.inner.cfg.runs_root.join(id);
    let known = d.inner.runs.lock().expect("runs lock").contains_key(id);
    let safe = !id.is_empty() && !id.contains('/') && !id.contains("..");
    if safe && (known || dir.join(MANIFEST_FILE).is_file()) {
        Ok(dir)
    } else {
        Err(ApiError::not_found(format!("unknown run `{id}`")))
    }
}

async fn run_telemetry(State(d): State<Daemon>, Path((id, stream)): Path<(String, String)>) -> ApiResult {
    let dir = run_dir(&d, &id)?;
    tokio::task::spawn_blocking(move || telemetry(dir, &stream)).await.map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Default, Deserialize)]
struct AggregateQuery {
    from: Option<u64>,
    to: Option<u64>,
    slot: Option<String>,
    replica: Option<u32>,
}

async fn run_aggregates(State(d): State<Daemon>, Path(id): Path<String>, Query(q): Query<AggregateQuery>) -> ApiResult {
    let dir = run_dir(&d, &id)?;
    let filter = QueryFilter {
        episodes: match (q.from, q.to) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0)..b.unwrap_or(u64::MAX)),
        },
        slot: q.slot,
        replica: q.replica,
    };
    let agg = tokio::task::spawn_blocking(move || query(&dir, &filter))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    ok(serde_json::to_value(agg).map_err(|e| ApiError::internal(e.to_string()))?)
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

async fn create_session(State(d): State<Daemon>, body: Bytes) -> ApiResult {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("validation", "body is not UTF-8"))?;
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| ApiError::validation(vec![(String::new(), format!("not valid JSON: {e}"))]))?;
    let mut errors: Vec<(String, String)> =
        duplicate_keys(text).into_iter().map(|p| (p, "duplicate key".into())).collect();
    let Some(obj) = doc.as_object() else {
        return Err(ApiError::validation(vec![(String::new(), "must be a JSON object".into())]));
    };
    for key in obj.keys() {
        if !["session_id", "task", "seed", "operators"].contains(&key.as_str()) {
            errors.push((key.clone(), "unknown field".into()));
        }
    }
    let task = match obj.get("task").and_then(Value::as_str) {
        Some(t) if Task::from_id(t).is_some() => Some(t.to_string()),
        Some(t) => {
            errors.push(("task".into(), format!("unknown task `{t}`")));
            None
        }
        None => {
            errors.push(("task".into(), "is required".into()));
            None
        }
    };
    let seed = match obj.get("seed") {
        None => 0,
        Some(v) => v.as_u64().unwrap_or_else(|| {
            errors.push(("seed".into(), "must be a non-negative integer".into()));
            0
        }),
    };
    let id = match obj.get("session_id") {
        None => format!("session-{}", d.inner.next_session.fetch_add(1, Ordering::Relaxed)),
        Some(Value::String(s)) if valid_session_id(s) => s.clone(),
        Some(_) => {
            errors.push(("session_id".into(), "must be 1 to 64 of [A-Za-z0-9_-]".into()));
            String::new()
        }
    };
    let mut configs = Vec::new();
    match obj.get("operators").and_then(Value::as_array) {
        None => errors.push(("operators".into(), "must be an array of run configs".into())),
        Some(list) => {
            let max = d.inner.cfg.max_replicas;
            if list.is_empty() || list.len() > max {
                errors.push(("operators".into(), format!("must hold 1 to {max} operators, got {}", list.len())));
            }
            for (i, v) in list.iter().enumerate() {
                match RunConfig::from_value(v) {
                    Ok(c) => {
                        if task.as_deref().is_some_and(|t| t != c.task) {
                            errors.push((
                                format!("operators[{i}].task"),
                                format!("must match session task, got `{}`", c.task),
                            ));
                        }
                        configs.push(c);
                    }
                    Err(e) => errors.extend(e.errors.into_iter().map(|f| {
                        let p = if f.path.is_empty() {
                            format!("operators[{i}]")
                        } else {
                            format!("operators[{i}].{}", f.path)
                        };
                        (p, f.message)
                    })),
                }
            }
        }
    }
    if !errors.is_empty() {
        return Err(ApiError::validation(errors));
    }
    let task = task.expect("validated");
    let mut sessions = d.inner.sessions.lock().expect("sessions lock");
    if sessions.contains_key(&id) {
        return Err(ApiError::conflict("conflict", format!("session `{id}` already exists")));
    }
    let entry = SessionEntry::spawn(&id, task.clone(), seed, configs, &d.inner.cfg);
    let count = obj["operators"].as_array().map_or(0, Vec::len);
    entry.events.publish(
        "status_changed",
        json!({"session_id": id, "status": "created", "task": task, "seed": seed, "replica_count": count}),
    );
    sessions.insert(id.clone(), entry);
    Ok((
        StatusCode::CREATED,
        Json(json!({"session_id": id, "status": "created", "task": task, "seed": seed, "replica_count": count})),
    )
        .into_response())
}

async fn list_sessions(State(d): State<Daemon>) -> ApiResult {
    let ids: Vec<Arc<SessionEntry>> = d.inner.sessions.lock().expect("sessions lock").values().cloned().collect();
    let mut out = Vec::new();
    for s in ids {
        out.push(s.status().await.unwrap_or_else(|_| json!({"session_id": s.id, "status": "gone"})));
    }
    ok(json!({"sessions": out}))
}

async fn get_session(State(d): State<Daemon>, Path(id): Path<String>) -> ApiResult {
    ok(d.session(&id)?.status().await?)
}

#[derive(Debug, Default, Deserialize)]
struct ControlQuery {
    expect_barrier: Option<u64>,
}

async fn session_control(
    State(d): State<Daemon>,
    Path((id, verb)): Path<(String, String)>,
    Query(q): Query<ControlQuery>,
) -> ApiResult {
    let verb = Verb::parse(&verb).ok_or_else(|| ApiError::not_found(format!("unknown verb `{verb}`")))?;
    ok(d.session(&id)?.control(verb, q.expect_barrier).await?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HumanAction {
    #[serde(default)]
    replica: usize,
    slot: String,
    action: u32,
}

async fn submit_human_action(State(d): State<Daemon>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let session = d.session(&id)?;
    let a: HumanAction =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("validation", e.to_string()))?;
    ok(session.human(a.replica, a.slot, a.action).await?)
}

async fn session_events(
    State(d): State<Daemon>,
    Path(id): Path<String>,
    Query(q): Query<EventQuery>,
    headers: HeaderMap,
) -> ApiResult {
    Ok(event_stream(&d.session(&id)?.events, &q, &headers))
}

#[derive(Debug, Default, Deserialize)]
struct FrameQuery {
    barrier: Option<u64>,
    mode: Option<String>,
    replica: Option<usize>,
}

async fn session_frames(State(d): State<Daemon>, Path(id): Path<String>, Query(q): Query<FrameQuery>) -> ApiResult {
    let session = d.session(&id)?;
    let rgb = match q.mode.as_deref() {
        None | Some("both") | Some("rgb") => true,
        Some("ascii") => false,
        Some(m) => return Err(ApiError::bad_request("validation", format!("unknown mode `{m}`"))),
    };
    let mut doc = session.frames(q.barrier, rgb).await?;
    if q.mode.as_deref() == Some("rgb") {
        for r in doc["replicas"].as_array_mut().into_iter().flatten() {
            r.as_object_mut().map(|o| o.remove("ascii"));
        }
    }
    if let Some(want) = q.replica {
        let replicas = doc["replicas"].as_array().cloned().unwrap_or_default();
        let kept: Vec<Value> = replicas.into_iter().filter(|r| r["replica"] == json!(want)).collect();
        if kept.is_empty() {
            return Err(ApiError::not_found(format!("no replica {want}")));
        }
        doc["replicas"] = Value::Array(kept);
    }
    ok(doc)
}

async fn session_telemetry(State(d): State<Daemon>, Path((id, stream)): Path<(String, String)>) -> ApiResult {
    let session = d.session(&id)?;
    let dir = d.inner.cfg.runs_root.join(&session.id);
    tokio::task::spawn_blocking(move || {
        if !dir.is_dir() {
            return Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::empty()).into_response());
        }
        telemetry(dir, &stream)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}
