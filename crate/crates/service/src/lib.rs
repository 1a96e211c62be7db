//! HTTP facade over a live session, so a person can answer the queries.
//!
//! One session per process. Reads are served from a snapshot that is only
//! replaced whole, so a poll never sees a half-applied round. Answers flip
//! the snapshot to `training` and hand the label to a blocking job that
//! owns the session until the next query (or the final policy) is ready.

mod documents;

use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use opride::orchestrator::{write_metrics, Session};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

pub use documents::{query_id, snapshot, QueryDocument, SegmentView, ServiceStatus, SessionState, StepView};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] opride::Error),
}

#[derive(Default)]
struct Shared {
    view: RwLock<Option<SessionState>>,
    session: Mutex<Option<Session>>,
    session_id: String,
    log_path: Option<PathBuf>,
}

/// Cheap to clone; all clones share one session.
#[derive(Clone, Default)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    /// A service with no session; every endpoint answers 404.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Takes ownership of `session` and starts selecting the first query in
    /// the background. Must be called inside a tokio runtime.
    ///
    /// Accepted answers are appended to `log_path` as query-log JSON lines.
    pub fn start(session: Session, log_path: Option<PathBuf>) -> Self {
        let session_id = session.config().digest()[..12].to_string();
        let view = documents::snapshot(&session, &session_id, None);
        let state = Self {
            shared: Arc::new(Shared {
                view: RwLock::new(Some(view)),
                session: Mutex::new(Some(session)),
                session_id,
                log_path,
            }),
        };
        state.spawn_advance(None);
        state
    }

    pub fn snapshot(&self) -> Option<SessionState> {
        self.shared.view.read().expect("view lock poisoned").clone()
    }

    fn spawn_advance(&self, label: Option<f64>) {
        let shared = Arc::clone(&self.shared);
        tokio::task::spawn_blocking(move || advance(&shared, label));
    }
}

/// Applies `label` (if any), then selects the next query or finishes, and
/// publishes the resulting snapshot.
fn advance(shared: &Shared, label: Option<f64>) {
    let mut guard = shared.session.lock().expect("session lock poisoned");
    let Some(session) = guard.as_mut() else { return };
    let result = (|| -> Result<(), ServiceError> {
        if let Some(label) = label {
            session.answer(label)?;
            if let (Some(path), Some(entry)) = (&shared.log_path, session.query_log().last()) {
                append_log(path, entry)?;
            }
        }
        if session.ready_to_finish() {
            session.finish()?;
        } else {
            session.prepare_query()?;
        }
        Ok(())
    })();
    let view = documents::snapshot(session, &shared.session_id, result.err().map(|e| e.to_string()));
    *shared.view.write().expect("view lock poisoned") = Some(view);
}

fn append_log(path: &Path, entry: &opride::query::QueryLogEntry) -> Result<(), ServiceError> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(entry).map_err(opride::Error::from)?;
    line.push(b'\n');
    file.write_all(&line)?;
    Ok(())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn no_session() -> Response {
    error(StatusCode::NOT_FOUND, "no session")
}

async fn get_session(State(state): State<AppState>) -> Response {
    match state.snapshot() {
        Some(view) => Json(view).into_response(),
        None => no_session(),
    }
}

async fn get_next_query(State(state): State<AppState>) -> Response {
    let Some(view) = state.snapshot() else { return no_session() };
    match view.pending {
        Some(doc) if view.status == ServiceStatus::AwaitingLabel => Json(doc).into_response(),
        _ => (
            StatusCode::CONFLICT,
            Json(json!({ "error": "no query is awaiting a label", "status": view.status })),
        )
            .into_response(),
    }
}

/// `"1"`/`1` → 1.0, `"0"`/`0` → 0.0, `"tie"` → 0.5.
pub fn parse_label(body: &[u8]) -> Option<f64> {
    let value: Value = serde_json::from_slice(body).ok()?;
    match value.get("label")? {
        Value::String(s) => match s.as_str() {
            "1" => Some(1.0),
            "0" => Some(0.0),
            "tie" => Some(0.5),
            _ => None,
        },
        Value::Number(n) => match n.as_u64() {
            Some(1) => Some(1.0),
            Some(0) => Some(0.0),
            _ => None,
        },
        _ => None,
    }
}

async fn post_answer(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let Some(label) = parse_label(&body) else {
        return error(StatusCode::BAD_REQUEST, "body must be {\"label\": \"1\" | \"0\" | \"tie\"}");
    };
    let round = {
        let mut guard = state.shared.view.write().expect("view lock poisoned");
        let Some(view) = guard.as_mut() else { return no_session() };
        let current = view.pending.as_ref().filter(|_| view.status == ServiceStatus::AwaitingLabel);
        match current {
            Some(doc) if doc.query_id == id => {
                let round = doc.round;
                view.status = ServiceStatus::Training;
                view.pending = None;
                round
            }
            _ => return error(StatusCode::CONFLICT, format!("query `{id}` is not awaiting a label")),
        }
    };
    state.spawn_advance(Some(label));
    (StatusCode::ACCEPTED, Json(json!({ "accepted": id, "round": round, "label": label }))).into_response()
}

async fn get_metrics(State(state): State<AppState>) -> Response {
    let Some(view) = state.snapshot() else { return no_session() };
    let mut body = Vec::new();
    if let Err(e) = write_metrics(&view.metrics, &mut body) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

/// The API routes, plus static UI files from `static_dir` for everything else.
pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/session", get(get_session))
        .route("/api/query/next", get(get_next_query))
        .route("/api/query/{id}/answer", post(post_answer))
        .route("/api/metrics", get(get_metrics))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr, static_dir: Option<&Path>) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state, static_dir)).await?;
    Ok(())
}
