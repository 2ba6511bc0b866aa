//! JSON HTTP API over the engine.
//!
//! Every failure is an [`ApiError`] body. Requests touching one session are
//! serialized: a second concurrent request on the same session gets 409.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use helmsman_core::corpus::TailoredDocument;
use helmsman_core::engine::{Effect, Engine, EngineError};
use helmsman_core::executor::ExecutionRecord;
use helmsman_core::plugins::{self, Origin, ParamValue, PluginManifest, RegistryError};
use helmsman_core::session::{Event, Session, SessionStore, StoreError};
use helmsman_core::Language;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
            details: None,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let code = e.code();
        let status = match code {
            "illegal_transition" | "rounds_exhausted" | "no_candidates_left" | "already_chosen" => {
                StatusCode::CONFLICT
            }
            "script_miss" | "backend_unavailable" | "backend_error" => StatusCode::BAD_GATEWAY,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let mut err = ApiError::new(status, code, e.to_string());
        if let EngineError::IllegalTransition { phase, event } = &e {
            err = err.with_details(json!({"phase": phase, "event": event}));
        }
        err
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "session_not_found", e.to_string()),
            StoreError::CorruptRecord { .. } => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "corrupt_record", e.to_string())
            }
            StoreError::Io { .. } => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string()),
        }
    }
}

/// The API form of a registry rejection. The same function backs both the
/// HTTP response and direct comparisons in tests.
pub fn registry_error(e: &RegistryError) -> ApiError {
    match e {
        RegistryError::InvalidManifest(errors) => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_manifest", e.to_string())
                .with_details(json!({ "errors": errors }))
        }
        RegistryError::DuplicateBundled(id) => {
            ApiError::new(StatusCode::CONFLICT, "duplicate_bundled", e.to_string())
                .with_details(json!({ "plugin_id": id }))
        }
        RegistryError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "plugin_not_found", e.to_string()),
        RegistryError::Parse { line, .. } => ApiError::new(StatusCode::BAD_REQUEST, "manifest_parse", e.to_string())
            .with_details(json!({ "line": line })),
        RegistryError::Io { .. } => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string()),
    }
}

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    if body.is_empty() {
        return serde_json::from_str("{}").map_err(|e| bad_request(format!("request body required: {e}")));
    }
    serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid JSON body: {e}")))
}

#[derive(Debug, Clone)]
pub enum ExecStatus {
    Running { session_id: String, plugin_id: String },
    Done(Box<ExecutionRecord>),
}

pub struct AppState {
    pub engine: Arc<Engine>,
    pub sessions: SessionStore,
    pub request_timeout: Duration,
    busy: Mutex<HashSet<String>>,
    executions: Mutex<HashMap<String, ExecStatus>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, sessions: SessionStore, request_timeout: Duration) -> Arc<Self> {
        Arc::new(Self {
            engine,
            sessions,
            request_timeout,
            busy: Mutex::default(),
            executions: Mutex::default(),
        })
    }

    fn claim(self: &Arc<Self>, session_id: &str) -> Result<SessionGuard, ApiError> {
        let mut busy = self.busy.lock().unwrap_or_else(|p| p.into_inner());
        if !busy.insert(session_id.to_string()) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "session_busy",
                format!("session {session_id} is handling another request"),
            ));
        }
        Ok(SessionGuard {
            state: self.clone(),
            session_id: session_id.to_string(),
        })
    }

    fn load(&self, id: &str) -> Result<Session, ApiError> {
        let s = self.sessions.restore(id)?;
        // warm the document cache for sessions restored after a restart
        self.engine.ensure_document(&s);
        Ok(s)
    }
}

/// Releases the per-session claim when dropped.
struct SessionGuard {
    state: Arc<AppState>,
    session_id: String,
}

impl Drop for SessionGuard {
    fn drop(&mut self) {
        self.state
            .busy
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&self.session_id);
    }
}

/// Runs blocking engine work off the async runtime, bounded by the request
/// timeout. The work itself is not cancelled on timeout, so the session
/// claim moves into the closure and lives until it finishes.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::time::timeout(state.request_timeout, tokio::task::spawn_blocking(f)).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
        Err(_) => Err(ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "timeout",
            format!("no result within {:?}", state.request_timeout),
        )),
    }
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: Session,
    pub doc_url: Option<String>,
}

impl From<Session> for SessionView {
    fn from(session: Session) -> Self {
        let doc_url = session.active_doc.as_ref().map(|id| format!("/docs/{id}"));
        Self { session, doc_url }
    }
}

#[derive(Debug, Serialize)]
pub struct MessageResponse {
    pub session: SessionView,
    pub effects: Vec<Effect>,
    /// `effects` rendered as text, one entry per effect.
    pub messages: Vec<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/message", post(post_message))
        .route("/sessions/{id}/execute", post(post_execute))
        .route("/executions/{id}", get(get_execution))
        .route("/docs/{doc_id}", get(get_doc))
        .route("/docs/{doc_id}/assets/{name}", get(get_asset))
        .route("/plugins", get(list_plugins).post(register_plugin))
        .route("/plugins/{id}", get(get_plugin))
        .route("/workspace/{id}", get(get_workspace))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    #[serde(default)]
    language: Option<Language>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let session = Session::new(req.language.unwrap_or(Language::En));
    let st = state.clone();
    let session = blocking(&state, move || {
        st.sessions.persist(&session)?;
        Ok(session)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(SessionView::from(session))).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let st = state.clone();
    let s = blocking(&state, move || st.load(&id)).await?;
    Ok(Json(s.into()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageRequest {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    event: Option<Event>,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MessageResponse>, ApiError> {
    let req: MessageRequest = parse_body(&body)?;
    let guard = state.claim(&id)?;
    let st = state.clone();
    blocking(&state, move || {
        let _guard = guard;
        let session = st.load(&id)?;
        let event = match (req.event, req.text) {
            (Some(e), _) => e,
            (None, Some(text)) => Engine::classify(&session, &text),
            (None, None) => return Err(bad_request("either text or event is required")),
        };
        let adv = st.engine.advance(&session, event)?;
        st.sessions.persist(&adv.session)?;
        let messages = adv.effects.iter().map(Effect::describe).collect();
        Ok(Json(MessageResponse {
            session: adv.session.into(),
            effects: adv.effects,
            messages,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExecuteRequest {
    #[serde(default)]
    args: BTreeMap<String, ParamValue>,
}

async fn post_execute(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: ExecuteRequest = parse_body(&body)?;
    let guard = state.claim(&id)?;
    let st = state.clone();
    let (session, pending) = blocking(&state, move || {
        let session = st.load(&id)?;
        let (session, pending) = st.engine.begin_execution(&session, req.args)?;
        st.sessions.persist(&session)?;
        Ok((session, pending))
    })
    .await?;

    let exec_id = pending.exec_id.clone();
    state.executions.lock().unwrap_or_else(|p| p.into_inner()).insert(
        exec_id.clone(),
        ExecStatus::Running {
            session_id: pending.session_id.clone(),
            plugin_id: pending.plugin_id.clone(),
        },
    );
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let record = st.engine.run_execution(&pending);
        match st.engine.finish_execution(&session, record.clone()) {
            Ok(adv) => {
                if let Err(e) = st.sessions.persist(&adv.session) {
                    tracing::error!("persisting session {}: {e}", adv.session.session_id);
                }
            }
            Err(e) => tracing::error!("finishing execution {}: {e}", record.exec_id),
        }
        st.executions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(record.exec_id.clone(), ExecStatus::Done(Box::new(record)));
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "exec_id": exec_id, "status": "running" })),
    )
        .into_response())
}

async fn get_execution(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let status = state
        .executions
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "execution_not_found", format!("no execution {id}")))?;
    Ok(Json(match status {
        ExecStatus::Running { session_id, plugin_id } => json!({
            "exec_id": id, "status": "running", "session_id": session_id, "plugin_id": plugin_id,
        }),
        ExecStatus::Done(record) => json!({ "exec_id": id, "status": "done", "record": record }),
    }))
}

fn find_doc(state: &AppState, doc_id: &str) -> Result<Arc<TailoredDocument>, ApiError> {
    state
        .engine
        .document(doc_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "doc_not_found", format!("no document {doc_id}")))
}

async fn get_doc(State(state): State<Arc<AppState>>, Path(doc_id): Path<String>) -> Result<Response, ApiError> {
    let doc = find_doc(&state, &doc_id)?;
    Ok(([(header::CONTENT_TYPE, "text/html; charset=utf-8")], doc.html.clone()).into_response())
}

async fn get_asset(
    State(state): State<Arc<AppState>>,
    Path((doc_id, name)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let doc = find_doc(&state, &doc_id)?;
    let source = doc
        .fragment_ids
        .iter()
        .filter_map(|id| state.engine.fragments.get(id, doc.language))
        .flat_map(|f| f.assets.iter())
        .find(|a| a.name == name)
        .map(|a| a.source.clone())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "asset_not_found", format!("no asset {name}")))?;
    let bytes = tokio::fs::read(&source)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string()))?;
    let mime = match source.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "svg" => "image/svg+xml",
        "webp" => "image/webp",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct LangQuery {
    #[serde(default)]
    lang: Option<String>,
}

async fn list_plugins(
    State(state): State<Arc<AppState>>,
    Query(q): Query<LangQuery>,
) -> Result<Json<Value>, ApiError> {
    let language = match q.lang.as_deref() {
        None => Language::En,
        Some(l) => l.parse().map_err(|e: helmsman_core::UnknownLanguage| bad_request(e.to_string()))?,
    };
    let registry = state.engine.registry.current();
    Ok(Json(json!({
        "version": registry.version,
        "plugins": registry.list_plugins(language),
    })))
}

async fn get_plugin(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<PluginManifest>, ApiError> {
    let registry = state.engine.registry.current();
    registry
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| registry_error(&RegistryError::NotFound(id)))
}

/// Accepts either a JSON manifest or `{"manifest_text": "..."}` in the
/// plugin file format. The origin is always user_defined.
pub fn manifest_from_body(body: &Bytes) -> Result<PluginManifest, ApiError> {
    let mut value: Value = parse_body(body)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| bad_request("expected a JSON object"))?;
    let mut manifest = if let Some(text) = obj.get("manifest_text") {
        let text = text.as_str().ok_or_else(|| bad_request("manifest_text must be a string"))?;
        plugins::parse_manifest(text).map_err(|e| {
            registry_error(&RegistryError::Parse {
                file: "manifest_text".into(),
                line: e.line,
                message: e.message,
            })
        })?
    } else {
        obj.insert("origin".into(), json!("user_defined"));
        serde_json::from_value(value).map_err(|e| bad_request(format!("invalid manifest: {e}")))?
    };
    manifest.origin = Origin::UserDefined;
    Ok(manifest)
}

async fn register_plugin(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let manifest = manifest_from_body(&body)?;
    let id = manifest.plugin_id.clone();
    let registry = state.engine.registry.register(manifest).map_err(|e| registry_error(&e))?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "plugin_id": id, "registry_version": registry.version })),
    )
        .into_response())
}

async fn get_workspace(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let st = state.clone();
    blocking(&state, move || {
        // unknown ids show the template without allocating a workspace
        let view = |state: &helmsman_core::workspace::WorkspaceState| {
            Json(json!({
                "workspace_id": id,
                "version": state.version,
                "dirty": state.dirty,
                "serialized": state.render(),
            }))
        };
        Ok(match st.engine.workspaces.get(&id) {
            Some(ws) => view(&ws.lock().unwrap_or_else(|p| p.into_inner()).state),
            None => view(&st.engine.workspace_template),
        })
    })
    .await
}
