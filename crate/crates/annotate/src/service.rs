//! HTTP endpoints.
//!
//! ```text
//! GET  /tasks?status=open|done   task list, ordered by task_id
//! GET  /tasks/{id}               one task
//! POST /tasks/{id}/judgments     store a judgment (201, 404, 409, 422)
//! GET  /score                    aggregate over all judgments (409 if none)
//! ```

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use ssvc_core::metrics::{ss_aggregate, JudgmentRecord};
use tower_http::cors::CorsLayer;

use crate::store::JudgmentStore;
use crate::tasks::{read_tasks, AnnotationTask, TaskRecord, TaskStatus};
use crate::AnnotateError;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub tasks_path: PathBuf,
    pub store_path: PathBuf,
    pub required_annotators: usize,
    /// Include reference captions in task responses.
    pub show_references: bool,
}

impl ServiceConfig {
    pub fn new(tasks_path: impl Into<PathBuf>, store_path: impl Into<PathBuf>) -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            tasks_path: tasks_path.into(),
            store_path: store_path.into(),
            required_annotators: 2,
            show_references: false,
        }
    }
}

pub struct AppState {
    tasks: BTreeMap<String, TaskRecord>,
    store: RwLock<JudgmentStore>,
    required_annotators: usize,
    show_references: bool,
}

impl AppState {
    pub fn load(config: &ServiceConfig) -> Result<Arc<Self>, AnnotateError> {
        let tasks = read_tasks(&config.tasks_path)?
            .into_iter()
            .map(|t| (t.task_id.clone(), t))
            .collect();
        Ok(Arc::new(Self {
            tasks,
            store: RwLock::new(JudgmentStore::open(&config.store_path)?),
            required_annotators: config.required_annotators.max(1),
            show_references: config.show_references,
        }))
    }

    fn view(&self, rec: &TaskRecord, store: &JudgmentStore) -> AnnotationTask {
        AnnotationTask::new(
            rec,
            store.received(&rec.task_id),
            self.required_annotators,
            self.show_references,
        )
    }

    pub fn flush(&self) -> Result<(), AnnotateError> {
        self.store.write().expect("store lock").flush()
    }
}

fn error(status: StatusCode, message: impl Into<String>, field: Option<&str>) -> Response {
    let mut body = json!({ "error": message.into() });
    if let Some(f) = field {
        body["field"] = json!(f);
    }
    (status, Json(body)).into_response()
}

#[derive(Deserialize)]
struct TaskQuery {
    status: Option<TaskStatus>,
}

async fn list_tasks(
    State(app): State<Arc<AppState>>,
    Query(q): Query<TaskQuery>,
) -> Json<Vec<AnnotationTask>> {
    let store = app.store.read().expect("store lock");
    let tasks = app
        .tasks
        .values()
        .map(|t| app.view(t, &store))
        .filter(|t| q.status.is_none_or(|s| t.status == s))
        .collect();
    Json(tasks)
}

async fn get_task(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let store = app.store.read().expect("store lock");
    match app.tasks.get(&id) {
        Some(t) => Json(app.view(t, &store)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown task `{id}`"), None),
    }
}

/// Schema violation: the offending field and what was wrong with it.
#[derive(Debug, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

fn field_err(field: &str, reason: impl Into<String>) -> FieldError {
    FieldError {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Builds a judgment for `task` from a JSON body. `video_id` and `caption`
/// may be omitted; when given they must match the task. Any client
/// timestamp is replaced by the server's.
pub fn validate_judgment(body: &Value, task: &TaskRecord) -> Result<JudgmentRecord, FieldError> {
    let obj = body
        .as_object()
        .ok_or_else(|| field_err("body", "expected a JSON object"))?;
    const KNOWN: [&str; 9] = [
        "video_id",
        "caption",
        "annotator_id",
        "s_grammar",
        "element_recall",
        "element_precision",
        "action_recall",
        "action_precision",
        "timestamp",
    ];
    if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(field_err(k, "unknown field"));
    }
    let boolean = |name: &str| -> Result<bool, FieldError> {
        match obj.get(name) {
            Some(Value::Bool(b)) => Ok(*b),
            Some(_) => Err(field_err(name, "must be a boolean")),
            None => Err(field_err(name, "missing")),
        }
    };
    let bool_list = |name: &str| -> Result<Vec<bool>, FieldError> {
        match obj.get(name) {
            Some(Value::Array(xs)) => xs
                .iter()
                .map(|x| {
                    x.as_bool()
                        .ok_or_else(|| field_err(name, "must contain only booleans"))
                })
                .collect(),
            Some(_) => Err(field_err(name, "must be a list of booleans")),
            None => Err(field_err(name, "missing")),
        }
    };
    let matching = |name: &str, expected: &str| -> Result<(), FieldError> {
        match obj.get(name) {
            None => Ok(()),
            Some(Value::String(s)) if s == expected => Ok(()),
            Some(Value::String(_)) => Err(field_err(
                name,
                format!("does not match the task (`{expected}`)"),
            )),
            Some(_) => Err(field_err(name, "must be a string")),
        }
    };
    matching("video_id", &task.video_id)?;
    matching("caption", &task.generated_caption)?;
    let annotator_id = match obj.get("annotator_id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(field_err("annotator_id", "must not be empty")),
        Some(_) => return Err(field_err("annotator_id", "must be a string")),
        None => return Err(field_err("annotator_id", "missing")),
    };
    Ok(JudgmentRecord {
        video_id: task.video_id.clone(),
        caption: task.generated_caption.clone(),
        annotator_id,
        s_grammar: boolean("s_grammar")?,
        element_recall: bool_list("element_recall")?,
        element_precision: bool_list("element_precision")?,
        action_recall: boolean("action_recall")?,
        action_precision: boolean("action_precision")?,
        timestamp: Some(chrono::Utc::now().to_rfc3339()),
    })
}

async fn post_judgment(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    let Some(task) = app.tasks.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown task `{id}`"), None);
    };
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}"), None),
    };
    let record = match validate_judgment(&value, task) {
        Ok(r) => r,
        Err(e) => {
            return error(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("field `{}` {}", e.field, e.reason),
                Some(&e.field),
            )
        }
    };
    let mut store = app.store.write().expect("store lock");
    match store.append(record.clone()) {
        Ok(()) => (StatusCode::CREATED, Json(record)).into_response(),
        Err(e @ AnnotateError::Duplicate { .. }) => {
            error(StatusCode::CONFLICT, e.to_string(), None)
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    }
}

async fn score(State(app): State<Arc<AppState>>) -> Response {
    let store = app.store.read().expect("store lock");
    if store.records().is_empty() {
        return error(StatusCode::CONFLICT, "no judgments recorded yet", None);
    }
    match ss_aggregate(store.records()) {
        Ok(report) => Json(report).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/judgments", post(post_judgment))
        .route("/score", get(score))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}

/// Binds the listener, reporting an occupied port clearly.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, AnnotateError> {
    tokio::net::TcpListener::bind(addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            AnnotateError::AddrInUse(addr)
        } else {
            AnnotateError::Io(e)
        }
    })
}

/// Serves until SIGINT or SIGTERM, then syncs the store.
pub async fn serve(config: ServiceConfig) -> Result<(), AnnotateError> {
    let state = AppState::load(&config)?;
    let listener = bind(config.bind).await?;
    log::info!(
        "serving {} tasks on http://{}",
        state.tasks.len(),
        listener.local_addr()?
    );
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    state.flush()
}
