//! Conversation state and its on-disk store. The transition logic lives in
//! [`crate::engine`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::executor::{ElicitationForm, ExecutionRecord};
use crate::llm::ChatMessage;
use crate::plugins::ParamValue;
use crate::qa::{BottleneckSignal, QaExchange};
use crate::recommender::Recommendation;
use crate::router::RoutingEpisode;
use crate::Language;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    RoutingMain,
    RoutingSub,
    ViewingDoc,
    Qa,
    Recommending,
    Eliciting,
    Executing,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Idle,
        Phase::RoutingMain,
        Phase::RoutingSub,
        Phase::ViewingDoc,
        Phase::Qa,
        Phase::Recommending,
        Phase::Eliciting,
        Phase::Executing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::RoutingMain => "routing_main",
            Phase::RoutingSub => "routing_sub",
            Phase::ViewingDoc => "viewing_doc",
            Phase::Qa => "qa",
            Phase::Recommending => "recommending",
            Phase::Eliciting => "eliciting",
            Phase::Executing => "executing",
        }
    }

    /// Phases belonging to the command flow.
    pub fn is_command(self) -> bool {
        matches!(self, Phase::Recommending | Phase::Eliciting | Phase::Executing)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Something the user (or UI) does. Free text is mapped to an event by
/// [`crate::engine::Engine::classify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Query {
        text: String,
    },
    /// Confirms one main-task candidate; the top candidate when `main_id`
    /// is absent.
    ConfirmMain {
        #[serde(default)]
        main_id: Option<String>,
    },
    /// Extra dialogue for the subtask stage.
    Say {
        text: String,
    },
    Reject {
        ids: Vec<String>,
        reason: String,
    },
    ConfirmSub {
        #[serde(default)]
        subtask_id: Option<String>,
    },
    Question {
        text: String,
    },
    Command {
        text: String,
    },
    ConfirmPlugin {
        #[serde(default)]
        plugin_id: Option<String>,
        #[serde(default)]
        override_ranking: bool,
    },
    SubmitArguments {
        #[serde(default)]
        args: BTreeMap<String, ParamValue>,
    },
    AcceptReroute,
    DeclineReroute,
    Cancel,
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Query { .. } => "query",
            Event::ConfirmMain { .. } => "confirm_main",
            Event::Say { .. } => "say",
            Event::Reject { .. } => "reject",
            Event::ConfirmSub { .. } => "confirm_sub",
            Event::Question { .. } => "question",
            Event::Command { .. } => "command",
            Event::ConfirmPlugin { .. } => "confirm_plugin",
            Event::SubmitArguments { .. } => "submit_arguments",
            Event::AcceptReroute => "accept_reroute",
            Event::DeclineReroute => "decline_reroute",
            Event::Cancel => "cancel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingState {
    pub episode: RoutingEpisode,
    pub query: String,
    pub candidates: Vec<String>,
    pub confirmed_main: Option<String>,
    /// User messages offered to the subtask stage, starting with the query.
    pub sub_dialogue: Vec<String>,
    pub proposed_sub: Option<String>,
    pub confirmed_sub: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandState {
    /// Phase to return to once the command flow ends.
    pub return_phase: Phase,
    pub text: String,
    /// Text handed to the recommender.
    pub need: String,
    pub form: Option<ElicitationForm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingReroute {
    pub signal: BottleneckSignal,
    /// Query for the fresh routing episode if the user accepts.
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub schema: u32,
    pub session_id: String,
    pub language: Language,
    pub phase: Phase,
    pub turns: Vec<ChatMessage>,
    pub routing_state: Option<RoutingState>,
    pub active_doc: Option<String>,
    /// Subtask whose fragments make up `active_doc`.
    #[serde(default)]
    pub active_subtask: Option<String>,
    pub qa_history: Vec<QaExchange>,
    /// Bottleneck detection only looks at exchanges from this index on, so a
    /// signal is not raised again for the same answers.
    #[serde(default)]
    pub bottleneck_mark: usize,
    pub recommendation: Option<Recommendation>,
    pub command: Option<CommandState>,
    pub pending_reroute: Option<PendingReroute>,
    pub executions: Vec<ExecutionRecord>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl Session {
    pub fn new(language: Language) -> Self {
        Self::with_id(uuid::Uuid::new_v4().to_string(), language)
    }

    pub fn with_id(session_id: impl Into<String>, language: Language) -> Self {
        let now = Utc::now();
        Self {
            schema: SCHEMA_VERSION,
            session_id: session_id.into(),
            language,
            phase: Phase::Idle,
            turns: Vec::new(),
            routing_state: None,
            active_doc: None,
            active_subtask: None,
            qa_history: Vec::new(),
            bottleneck_mark: 0,
            recommendation: None,
            command: None,
            pending_reroute: None,
            executions: Vec::new(),
            created_at: now,
            updated_at: now,
        }
    }

    pub fn confirmed_sub(&self) -> Option<&str> {
        self.active_subtask.as_deref()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session {0:?} not found")]
    NotFound(String),
    #[error("session {id:?} is corrupt: {details}")]
    CorruptRecord { id: String, details: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One JSON file per session, written via a temporary file and rename.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(|source| StoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn path_for(&self, id: &str) -> Option<PathBuf> {
        // ids become file names, so only allow a conservative alphabet
        let ok = !id.is_empty()
            && id.len() <= 128
            && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
        ok.then(|| self.dir.join(format!("{id}.json")))
    }

    pub fn persist(&self, session: &Session) -> Result<(), StoreError> {
        let path = self
            .path_for(&session.session_id)
            .ok_or_else(|| StoreError::CorruptRecord {
                id: session.session_id.clone(),
                details: "session id is not usable as a file name".into(),
            })?;
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        serde_json::to_writer_pretty(&mut tmp, session).expect("session serializes");
        std::io::Write::flush(&mut tmp).map_err(io)?;
        tmp.persist(&path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn restore(&self, id: &str) -> Result<Session, StoreError> {
        let path = self
            .path_for(id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(id.to_string()))
            }
            Err(source) => return Err(StoreError::Io { path, source }),
        };
        let corrupt = |details: String| StoreError::CorruptRecord {
            id: id.to_string(),
            details,
        };
        let session: Session = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if session.schema != SCHEMA_VERSION {
            return Err(corrupt(format!("unsupported schema {}", session.schema)));
        }
        if session.session_id != id {
            return Err(corrupt(format!("file holds session {:?}", session.session_id)));
        }
        Ok(session)
    }

    /// Ids of all stored sessions, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let rd = std::fs::read_dir(&self.dir).map_err(|source| StoreError::Io {
            path: self.dir.clone(),
            source,
        })?;
        let mut ids: Vec<String> = rd
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json").map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}
