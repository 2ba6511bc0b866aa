//! Language-model gateway.
//!
//! Every component talks to a model through [`LlmBackend`]. Two backends ship:
//! [`ScriptedBackend`], a rule table loaded from a fixture file that answers
//! deterministically and never touches the network, and [`HttpBackend`], which
//! forwards requests to an OpenAI-compatible chat completions endpoint.
//!
//! Script files hold one rule per line:
//!
//! ```text
//! <purpose_tag> TAB <exact|substring|regex> TAB <pattern> TAB <response>
//! ```
//!
//! Rules are tried in file order against the last user message and the first
//! match wins. `\n`, `\t` and `\\` are unescaped in responses and in
//! exact/substring patterns. Lines starting with `#` are comments.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("script has no rule for purpose {purpose} matching {text:?}")]
    ScriptMiss { purpose: Purpose, text: String },
    #[error("script parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate rule at line {line}: ({purpose}, {pattern:?}) already defined")]
    DuplicateRule {
        line: usize,
        purpose: Purpose,
        pattern: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// What a completion is for. Script rules are scoped to one purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    RouteMain,
    RouteSub,
    QaAnswer,
    Recommend,
    Augment,
}

impl Purpose {
    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::RouteMain => "route_main",
            Purpose::RouteSub => "route_sub",
            Purpose::QaAnswer => "qa_answer",
            Purpose::Recommend => "recommend",
            Purpose::Augment => "augment",
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Purpose {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "route_main" => Purpose::RouteMain,
            "route_sub" => Purpose::RouteSub,
            "qa_answer" => Purpose::QaAnswer,
            "recommend" => Purpose::Recommend,
            "augment" => Purpose::Augment,
            other => return Err(format!("unknown purpose tag {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub purpose: Purpose,
    pub max_response_chars: usize,
    /// Forwarded by the HTTP backend, ignored by the scripted one.
    pub temperature_hint: f32,
}

impl CompletionRequest {
    pub fn new(purpose: Purpose, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            purpose,
            max_response_chars: 4000,
            temperature_hint: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| GatewayError::InvalidRequest("messages must not be empty".into()))?;
        if first.role != Role::System {
            return Err(GatewayError::InvalidRequest(
                "first message must have role=system".into(),
            ));
        }
        if let Some(i) = self.messages.iter().position(|m| m.content.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest(format!(
                "message {i} has empty content"
            )));
        }
        if self.max_response_chars == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_response_chars must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.temperature_hint) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature_hint {} outside [0, 1]",
                self.temperature_hint
            )));
        }
        Ok(())
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

/// A text-completion endpoint.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_ref: Option<String>,
    #[serde(default)]
    pub script_path: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl BackendConfig {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            api_key_ref: None,
            script_path: Some(path.into()),
            model: None,
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            api_key_ref: None,
            script_path: None,
            model: None,
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_ms == 0 {
            return Err(GatewayError::InvalidConfig("timeout must be > 0".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() => Err(GatewayError::InvalidConfig(
                "http backend requires an endpoint".into(),
            )),
            BackendKind::Scripted if self.script_path.is_none() => Err(
                GatewayError::InvalidConfig("scripted backend requires script_path".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Builds the backend described by `config`.
pub fn connect(config: &BackendConfig) -> Result<Arc<dyn LlmBackend>, GatewayError> {
    config.validate()?;
    match config.kind {
        BackendKind::Scripted => {
            let path = config.script_path.as_deref().expect("validated");
            Ok(Arc::new(load_script(path)?))
        }
        BackendKind::Http => Ok(Arc::new(HttpBackend::new(config)?)),
    }
}

/// One-shot completion against the backend described by `config`.
pub fn complete(request: &CompletionRequest, config: &BackendConfig) -> Result<String, GatewayError> {
    connect(config)?.complete(request)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    Exact,
    Substring,
    Regex,
}

impl FromStr for MatchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(MatchKind::Exact),
            "substring" => Ok(MatchKind::Substring),
            "regex" => Ok(MatchKind::Regex),
            other => Err(format!("unknown match kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub purpose: Purpose,
    pub kind: MatchKind,
    pub pattern: String,
    pub response: String,
    pub line: usize,
    regex: Option<Regex>,
}

impl ScriptRule {
    fn matches(&self, text: &str) -> bool {
        match self.kind {
            MatchKind::Exact => text.trim() == self.pattern,
            MatchKind::Substring => text.contains(&self.pattern),
            MatchKind::Regex => self.regex.as_ref().is_some_and(|r| r.is_match(text)),
        }
    }
}

/// Deterministic rule-table backend. Read-only after load.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
}

pub fn load_script(path: &Path) -> Result<ScriptedBackend, GatewayError> {
    let text = std::fs::read_to_string(path).map_err(|source| GatewayError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ScriptedBackend::parse(&text)
}

impl ScriptedBackend {
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let mut rules = Vec::new();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.splitn(4, '\t').collect();
            if fields.len() != 4 {
                return Err(GatewayError::Parse {
                    line,
                    message: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let purpose: Purpose = fields[0]
                .parse()
                .map_err(|message| GatewayError::Parse { line, message })?;
            let kind: MatchKind = fields[1]
                .parse()
                .map_err(|message| GatewayError::Parse { line, message })?;
            let pattern = match kind {
                MatchKind::Regex => fields[2].to_string(),
                _ => unescape(fields[2]).map_err(|message| GatewayError::Parse { line, message })?,
            };
            if pattern.is_empty() {
                return Err(GatewayError::Parse {
                    line,
                    message: "empty pattern".into(),
                });
            }
            let regex = match kind {
                MatchKind::Regex => Some(Regex::new(&pattern).map_err(|e| GatewayError::Parse {
                    line,
                    message: e.to_string(),
                })?),
                _ => None,
            };
            let response =
                unescape(fields[3]).map_err(|message| GatewayError::Parse { line, message })?;
            if !seen.insert((purpose, pattern.clone())) {
                return Err(GatewayError::DuplicateRule {
                    line,
                    purpose,
                    pattern,
                });
            }
            rules.push(ScriptRule {
                purpose,
                kind,
                pattern,
                response,
                line,
                regex,
            });
        }
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let text = request.last_user_message().unwrap_or("");
        let rule = self
            .rules
            .iter()
            .filter(|r| r.purpose == request.purpose)
            .find(|r| r.matches(text))
            .ok_or_else(|| GatewayError::ScriptMiss {
                purpose: request.purpose,
                text: text.to_string(),
            })?;
        Ok(rule
            .response
            .chars()
            .take(request.max_response_chars)
            .collect())
    }
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

/// Wraps a backend and keeps every request it sees, in order.
#[derive(Debug)]
pub struct RecordingBackend<B> {
    inner: B,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.requests.lock().expect("recording lock").clone()
    }

    pub fn last_request(&self) -> Option<CompletionRequest> {
        self.requests.lock().expect("recording lock").last().cloned()
    }
}

impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.requests
            .lock()
            .expect("recording lock")
            .push(request.clone());
        self.inner.complete(request)
    }
}

/// OpenAI-compatible `chat/completions` client.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let api_key = match &config.api_key_ref {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::InvalidConfig(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(Self {
            endpoint: config.endpoint.clone().expect("validated"),
            api_key,
            model: config.model.clone().unwrap_or_else(|| "gpt-4o-mini".into()),
            agent,
        })
    }

    fn post_once(&self, body: &serde_json::Value) -> Result<serde_json::Value, ureq::Error> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        req.send_json(body)?.body_mut().read_json()
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let body = serde_json::json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature_hint,
        });
        let reply = match self.post_once(&body) {
            Err(ureq::Error::Timeout(_)) => {
                tracing::warn!(endpoint = %self.endpoint, "completion timed out, retrying once");
                self.post_once(&body)
            }
            other => other,
        }
        .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        let text = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| {
                GatewayError::BackendUnavailable("response has no choices[0].message.content".into())
            })?;
        Ok(text.chars().take(request.max_response_chars).collect())
    }
}
