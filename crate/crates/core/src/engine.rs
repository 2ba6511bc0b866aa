//! The conversation state machine.
//!
//! ```text
//! idle --query--> routing_main --confirm_main--> routing_sub --confirm_sub--> viewing_doc
//! viewing_doc --question--> qa --(bottleneck, accept_reroute)--> routing_main
//! any non-command phase --command--> recommending --confirm_plugin--> eliciting
//!     --submit_arguments--> executing --> back to the phase the command started in
//! ```
//!
//! [`Engine::advance`] works on a copy of the session and only hands it back
//! on success, so an illegal or failing event never changes the caller's
//! session.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::corpus::{qa_context, CorpusError, DocCache, FragmentStore, TailoredDocument};
use crate::executor::{elicit, ElicitationForm, ExecutionRecord, Executor, Outcome, WorkspaceStore};
use crate::llm::{ChatMessage, GatewayError, LlmBackend};
use crate::plugins::{ParamValue, Registry, SharedRegistry};
use crate::qa::{self, AugmentationStore, BottleneckKind, BottleneckRules, QaError};
use crate::recommender::{self, Method, RecommendError};
use crate::router::{FeedbackScope, RejectionFeedback, Router, RouterError, DEFAULT_MAX_ROUNDS};
use crate::session::{CommandState, Event, PendingReroute, Phase, RoutingState, Session};
use crate::taxonomy::{SharedTaxonomy, TaskTaxonomy};
use crate::workspace::WorkspaceState;
use crate::Language;

pub const COMMAND_PREFIX: &str = "/do";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub max_rounds: u32,
    pub bottleneck: BottleneckRules,
    pub recommend_method: Method,
    pub top_k: usize,
    /// Distill the session log into notes as soon as a bottleneck fires.
    pub auto_augment: bool,
    pub max_notes: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            bottleneck: BottleneckRules::default(),
            recommend_method: Method::Llm,
            top_k: recommender::DEFAULT_TOP_K,
            auto_augment: true,
            max_notes: qa::DEFAULT_MAX_NOTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCard {
    pub id: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPlugin {
    pub plugin_id: String,
    pub display_name: String,
    pub score: f64,
}

/// What an event produced, in a form both the CLI and the HTTP API render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Effect {
    MainCandidates {
        round: u32,
        fallback: bool,
        candidates: Vec<TaskCard>,
    },
    SubProposal {
        main: TaskCard,
        subtask: TaskCard,
        fallback: bool,
    },
    DocumentReady {
        doc_id: String,
        fragment_ids: Vec<String>,
    },
    Answer {
        text: String,
        grounded: bool,
        cited: Vec<String>,
    },
    Bottleneck {
        kind: BottleneckKind,
        evidence: String,
        notes_added: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        augment_error: Option<String>,
        reroute_query: String,
    },
    Recommendations {
        method: Method,
        fallback: bool,
        items: Vec<RankedPlugin>,
    },
    Form {
        form: ElicitationForm,
    },
    Execution {
        exec_id: String,
        plugin_id: String,
        outcome: Outcome,
        changes: usize,
        version: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Notice {
        text: String,
    },
}

impl Effect {
    /// One plain-text rendering, used for assistant turns and the CLI.
    /// Contains no ids that vary between runs.
    pub fn describe(&self) -> String {
        match self {
            Effect::MainCandidates {
                round,
                fallback,
                candidates,
            } => {
                let list: Vec<String> = candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| format!("  {}. {} ({})", i + 1, c.id, c.title))
                    .collect();
                format!(
                    "Main task candidates, round {round}{}:\n{}",
                    if *fallback { " (lexical fallback)" } else { "" },
                    list.join("\n")
                )
            }
            Effect::SubProposal {
                main,
                subtask,
                fallback,
            } => format!(
                "Suggested subtask of {}: {} ({}){}",
                main.id,
                subtask.id,
                subtask.title,
                if *fallback { " (lexical fallback)" } else { "" }
            ),
            Effect::DocumentReady {
                doc_id,
                fragment_ids,
            } => format!(
                "Tailored document {doc_id} is ready with fragments: {}",
                fragment_ids.join(", ")
            ),
            Effect::Answer {
                text,
                grounded,
                cited,
            } => {
                let tag = if *grounded {
                    format!("grounded in {}", cited.join(", "))
                } else {
                    "not grounded".to_string()
                };
                format!("{text}\n  [{tag}]")
            }
            Effect::Bottleneck {
                kind,
                evidence,
                notes_added,
                augment_error,
                reroute_query,
            } => {
                let kind = serde_json::to_value(kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                let mut s = format!("Knowledge bottleneck ({kind}): {evidence}.\n");
                match augment_error {
                    Some(e) => s.push_str(&format!("  Could not save notes: {e}\n")),
                    None => s.push_str(&format!("  Saved {notes_added} note(s) from this conversation.\n")),
                }
                s.push_str(&format!("  Start a new task search for \"{reroute_query}\"? (accept or decline)"));
                s
            }
            Effect::Recommendations {
                method,
                fallback,
                items,
            } => {
                let method = match method {
                    Method::Llm => "llm",
                    Method::Lexical => "lexical",
                    Method::Manual => "manual",
                };
                let list: Vec<String> = items
                    .iter()
                    .enumerate()
                    .map(|(i, p)| format!("  {}. {} ({}) score {:.3}", i + 1, p.plugin_id, p.display_name, p.score))
                    .collect();
                format!(
                    "Recommended plugins ({method}{}):\n{}",
                    if *fallback { ", fallback" } else { "" },
                    list.join("\n")
                )
            }
            Effect::Form { form } => {
                let mut s = format!("Parameters for {}:", form.plugin_id);
                if form.prompts.is_empty() {
                    s.push_str(" none, ready to run");
                }
                for p in &form.prompts {
                    let mut bits = vec![p.kind.to_string()];
                    if p.required {
                        bits.push("required".into());
                    }
                    if let Some(u) = &p.unit {
                        bits.push(format!("unit {u}"));
                    }
                    if let Some(d) = &p.default {
                        bits.push(format!("default {}", d.to_text()));
                    }
                    if !p.allowed_values.is_empty() {
                        bits.push(format!("one of {}", p.allowed_values.join("|")));
                    }
                    s.push_str(&format!("\n  {} ({}): {}", p.name, bits.join(", "), p.description));
                }
                for ex in &form.examples {
                    let vals: Vec<String> =
                        ex.values.iter().map(|(k, v)| format!("{k}={}", v.to_text())).collect();
                    s.push_str(&format!("\n  example: {} -> {}", ex.caption, vals.join(" ")));
                }
                s
            }
            Effect::Execution {
                plugin_id,
                outcome,
                changes,
                version,
                error,
                ..
            } => {
                let outcome = match outcome {
                    Outcome::Ok => "ok",
                    Outcome::Failed => "failed",
                    Outcome::Rejected => "rejected",
                };
                let mut s = format!(
                    "Execution of {plugin_id} {outcome}: {changes} item(s) changed, workspace version {version}"
                );
                if let Some(e) = error {
                    s.push_str(&format!("\n  {e}"));
                }
                s
            }
            Effect::Notice { text } => text.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("event {event} is not allowed in phase {phase}")]
    IllegalTransition { phase: Phase, event: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
}

impl EngineError {
    /// Stable machine-readable code for API clients.
    pub fn code(&self) -> &'static str {
        fn backend(e: &GatewayError) -> &'static str {
            match e {
                GatewayError::ScriptMiss { .. } => "script_miss",
                GatewayError::BackendUnavailable(_) => "backend_unavailable",
                _ => "backend_error",
            }
        }
        match self {
            EngineError::IllegalTransition { .. } => "illegal_transition",
            EngineError::Invalid(_) => "invalid_event",
            EngineError::Router(e) => match e {
                RouterError::EmptyQuery => "empty_query",
                RouterError::RoundsExhausted { .. } => "rounds_exhausted",
                RouterError::NoCandidatesLeft => "no_candidates_left",
                RouterError::InvalidFeedback(_) => "invalid_feedback",
                RouterError::UnknownTask(_) => "unknown_task",
                RouterError::Backend(g) => backend(g),
            },
            EngineError::Corpus(_) => "document_error",
            EngineError::Qa(e) => match e {
                QaError::EmptyQuestion => "empty_question",
                QaError::Backend(g) => backend(g),
                _ => "qa_error",
            },
            EngineError::Recommend(e) => match e {
                RecommendError::EmptyNeed => "empty_command",
                RecommendError::EmptyRegistry => "empty_registry",
                RecommendError::NotRecommended(_) => "not_recommended",
                RecommendError::UnknownPlugin(_) => "unknown_plugin",
                RecommendError::AlreadyChosen => "already_chosen",
                RecommendError::Backend(g) => backend(g),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Advance {
    pub session: Session,
    pub effects: Vec<Effect>,
}

/// An execution that has been started but not yet run.
#[derive(Debug, Clone)]
pub struct PendingExecution {
    pub exec_id: String,
    pub session_id: String,
    pub plugin_id: String,
    pub args: BTreeMap<String, ParamValue>,
}

pub struct Engine {
    pub backend: Arc<dyn LlmBackend>,
    pub taxonomy: SharedTaxonomy,
    pub fragments: Arc<FragmentStore>,
    pub docs: DocCache,
    pub registry: SharedRegistry,
    pub augmentations: AugmentationStore,
    pub executor: Executor,
    pub workspaces: WorkspaceStore,
    pub workspace_template: WorkspaceState,
    pub settings: EngineSettings,
}

fn illegal(phase: Phase, event: &Event) -> EngineError {
    EngineError::IllegalTransition {
        phase,
        event: event.name(),
    }
}

impl Engine {
    /// An engine with default settings, an in-memory augmentation store and
    /// a default executor. Adjust the public fields for anything else.
    pub fn new(
        backend: Arc<dyn LlmBackend>,
        taxonomy: TaskTaxonomy,
        fragments: FragmentStore,
        registry: Registry,
        workspace_template: WorkspaceState,
    ) -> Self {
        Self {
            backend,
            taxonomy: SharedTaxonomy::new(taxonomy),
            fragments: Arc::new(fragments),
            docs: DocCache::new(),
            registry: SharedRegistry::new(registry),
            augmentations: AugmentationStore::in_memory(),
            executor: Executor::default(),
            workspaces: WorkspaceStore::new(),
            workspace_template,
            settings: EngineSettings::default(),
        }
    }

    /// Maps free text to an event for the session's phase: `/do ...` is a
    /// command anywhere, otherwise the phase decides.
    pub fn classify(session: &Session, text: &str) -> Event {
        let trimmed = text.trim();
        if let Some(rest) = trimmed.strip_prefix(COMMAND_PREFIX) {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return Event::Command {
                    text: rest.trim().to_string(),
                };
            }
        }
        let text = trimmed.to_string();
        match session.phase {
            Phase::Idle | Phase::RoutingMain => Event::Query { text },
            Phase::ViewingDoc | Phase::Qa => Event::Question { text },
            _ => Event::Say { text },
        }
    }

    pub fn document(&self, doc_id: &str) -> Option<Arc<TailoredDocument>> {
        self.docs.get(doc_id)
    }

    /// The session's active document, re-stitched from its subtask when the
    /// cache no longer holds it (after a restart, say). `None` if the
    /// session has no document or the corpus changed underneath it.
    pub fn ensure_document(&self, session: &Session) -> Option<Arc<TailoredDocument>> {
        let doc_id = session.active_doc.as_deref()?;
        if let Some(doc) = self.docs.get(doc_id) {
            return Some(doc);
        }
        let tax = self.taxonomy.current();
        let sub = tax.lookup_subtask(session.active_subtask.as_deref()?).ok()?;
        let doc = self
            .docs
            .get_or_stitch(&sub.fragment_ids, session.language, &self.fragments)
            .ok()?;
        (doc.doc_id == doc_id).then_some(doc)
    }

    pub fn advance(&self, session: &Session, event: Event) -> Result<Advance, EngineError> {
        let mut s = session.clone();
        let effects = match event {
            Event::SubmitArguments { args } => {
                let pending = self.begin_execution_in(&mut s, args)?;
                let record = self.run_execution(&pending);
                vec![self.finish_execution_in(&mut s, record)]
            }
            event => self.step(&mut s, event)?,
        };
        for e in &effects {
            s.turns.push(ChatMessage::assistant(e.describe()));
        }
        s.updated_at = Utc::now();
        Ok(Advance { session: s, effects })
    }

    /// Moves the session to `executing`. The caller runs the returned job
    /// with [`Engine::run_execution`] and then calls
    /// [`Engine::finish_execution`].
    pub fn begin_execution(
        &self,
        session: &Session,
        args: BTreeMap<String, ParamValue>,
    ) -> Result<(Session, PendingExecution), EngineError> {
        let mut s = session.clone();
        let pending = self.begin_execution_in(&mut s, args)?;
        s.updated_at = Utc::now();
        Ok((s, pending))
    }

    pub fn run_execution(&self, pending: &PendingExecution) -> ExecutionRecord {
        let registry = self.registry.current();
        let ws = self
            .workspaces
            .get_or_create(&pending.session_id, &self.workspace_template);
        let mut ws = ws.lock().unwrap_or_else(|p| p.into_inner());
        self.executor
            .execute_as(&pending.exec_id, &pending.plugin_id, &pending.args, &registry, &mut ws)
    }

    pub fn finish_execution(
        &self,
        session: &Session,
        record: ExecutionRecord,
    ) -> Result<Advance, EngineError> {
        if session.phase != Phase::Executing {
            return Err(EngineError::IllegalTransition {
                phase: session.phase,
                event: "finish_execution",
            });
        }
        let mut s = session.clone();
        let effect = self.finish_execution_in(&mut s, record);
        s.turns.push(ChatMessage::assistant(effect.describe()));
        s.updated_at = Utc::now();
        Ok(Advance {
            session: s,
            effects: vec![effect],
        })
    }

    fn begin_execution_in(
        &self,
        s: &mut Session,
        args: BTreeMap<String, ParamValue>,
    ) -> Result<PendingExecution, EngineError> {
        if s.phase != Phase::Eliciting {
            return Err(EngineError::IllegalTransition {
                phase: s.phase,
                event: "submit_arguments",
            });
        }
        let plugin_id = s
            .recommendation
            .as_ref()
            .and_then(|r| r.chosen.clone())
            .ok_or_else(|| EngineError::Invalid("no plugin has been chosen".into()))?;
        let shown: Vec<String> = args.iter().map(|(k, v)| format!("{k}={}", v.to_text())).collect();
        s.turns.push(ChatMessage::user(format!("run {plugin_id} {}", shown.join(" ")).trim_end().to_string()));
        s.phase = Phase::Executing;
        Ok(PendingExecution {
            exec_id: uuid::Uuid::new_v4().to_string(),
            session_id: s.session_id.clone(),
            plugin_id,
            args,
        })
    }

    fn finish_execution_in(&self, s: &mut Session, record: ExecutionRecord) -> Effect {
        let effect = Effect::Execution {
            exec_id: record.exec_id.clone(),
            plugin_id: record.plugin_id.clone(),
            outcome: record.outcome,
            changes: record.diff.len(),
            version: record.version_after,
            error: record.error.clone(),
        };
        if record.outcome == Outcome::Rejected {
            // let the user correct the arguments
            s.phase = Phase::Eliciting;
        } else {
            s.phase = s.command.take().map(|c| c.return_phase).unwrap_or(Phase::Idle);
        }
        s.executions.push(record);
        effect
    }

    fn card_main(tax: &TaskTaxonomy, id: &str, lang: Language) -> TaskCard {
        let title = tax.main_task(id).map(|m| m.title(lang).to_string()).unwrap_or_default();
        TaskCard {
            id: id.to_string(),
            title,
        }
    }

    fn card_sub(tax: &TaskTaxonomy, id: &str, lang: Language) -> TaskCard {
        let title = tax.lookup_subtask(id).map(|m| m.title(lang).to_string()).unwrap_or_default();
        TaskCard {
            id: id.to_string(),
            title,
        }
    }

    fn select_main(&self, s: &mut Session, tax: &TaskTaxonomy) -> Result<Effect, EngineError> {
        let rs = s.routing_state.as_mut().expect("routing state present");
        let sel = Router::new(&*self.backend, s.language).select_main(&rs.query, tax, &rs.episode)?;
        rs.candidates = sel.candidates.clone();
        Ok(Effect::MainCandidates {
            round: sel.round,
            fallback: sel.fallback,
            candidates: sel
                .candidates
                .iter()
                .map(|id| Self::card_main(tax, id, s.language))
                .collect(),
        })
    }

    fn select_sub(&self, s: &mut Session, tax: &TaskTaxonomy) -> Result<Effect, EngineError> {
        let lang = s.language;
        let rs = s.routing_state.as_mut().expect("routing state present");
        let main_id = rs.confirmed_main.clone().expect("main confirmed");
        let dialogue: Vec<ChatMessage> = rs.sub_dialogue.iter().map(ChatMessage::user).collect();
        let sel = Router::new(&*self.backend, lang).select_sub(&main_id, &dialogue, tax, &rs.episode)?;
        rs.proposed_sub = Some(sel.subtask_id.clone());
        Ok(Effect::SubProposal {
            main: Self::card_main(tax, &main_id, lang),
            subtask: Self::card_sub(tax, &sel.subtask_id, lang),
            fallback: sel.fallback,
        })
    }

    fn start_routing(&self, s: &mut Session, query: String) -> Result<Effect, EngineError> {
        let tax = self.taxonomy.current();
        s.routing_state = Some(RoutingState {
            episode: crate::router::RoutingEpisode::new(self.settings.max_rounds),
            query: query.clone(),
            candidates: vec![],
            confirmed_main: None,
            sub_dialogue: vec![query],
            proposed_sub: None,
            confirmed_sub: None,
        });
        let effect = self.select_main(s, &tax)?;
        s.phase = Phase::RoutingMain;
        s.active_doc = None;
        s.active_subtask = None;
        s.pending_reroute = None;
        Ok(effect)
    }

    fn step(&self, s: &mut Session, event: Event) -> Result<Vec<Effect>, EngineError> {
        let phase = s.phase;
        match (phase, &event) {
            (Phase::Idle | Phase::RoutingMain, Event::Query { text }) => {
                s.turns.push(ChatMessage::user(text.clone()));
                Ok(vec![self.start_routing(s, text.clone())?])
            }
            (Phase::RoutingMain, Event::ConfirmMain { main_id }) => {
                let tax = self.taxonomy.current();
                let rs = s.routing_state.as_mut().expect("routing state in routing phase");
                let id = match main_id {
                    Some(id) if rs.candidates.contains(id) => id.clone(),
                    Some(id) => {
                        return Err(EngineError::Invalid(format!("{id:?} is not a current candidate")))
                    }
                    None => rs.candidates[0].clone(),
                };
                rs.confirmed_main = Some(id);
                s.turns.push(ChatMessage::user(format!("confirm {}", rs.confirmed_main.as_deref().unwrap_or(""))));
                let effect = self.select_sub(s, &tax)?;
                s.phase = Phase::RoutingSub;
                Ok(vec![effect])
            }
            (Phase::RoutingMain | Phase::RoutingSub, Event::Reject { ids, reason }) => {
                let tax = self.taxonomy.current();
                let scope = if phase == Phase::RoutingMain {
                    FeedbackScope::Main
                } else {
                    FeedbackScope::Sub
                };
                let rs = s.routing_state.as_mut().expect("routing state in routing phase");
                let ids = if ids.is_empty() {
                    match scope {
                        FeedbackScope::Main => rs.candidates.clone(),
                        FeedbackScope::Sub => rs.proposed_sub.iter().cloned().collect(),
                    }
                } else {
                    ids.clone()
                };
                rs.episode.apply_feedback(&RejectionFeedback {
                    rejected_ids: ids.clone(),
                    reason: reason.clone(),
                    scope,
                })?;
                s.turns.push(ChatMessage::user(format!("reject {}: {reason}", ids.join(", "))));
                let effect = match scope {
                    FeedbackScope::Main => self.select_main(s, &tax)?,
                    FeedbackScope::Sub => self.select_sub(s, &tax)?,
                };
                Ok(vec![effect])
            }
            (Phase::RoutingSub, Event::Say { text }) => {
                let tax = self.taxonomy.current();
                s.turns.push(ChatMessage::user(text.clone()));
                s.routing_state
                    .as_mut()
                    .expect("routing state in routing phase")
                    .sub_dialogue
                    .push(text.clone());
                Ok(vec![self.select_sub(s, &tax)?])
            }
            (Phase::RoutingSub, Event::ConfirmSub { subtask_id }) => {
                let tax = self.taxonomy.current();
                let rs = s.routing_state.as_mut().expect("routing state in routing phase");
                let id = match (subtask_id, &rs.proposed_sub) {
                    (Some(id), _) => id.clone(),
                    (None, Some(p)) => p.clone(),
                    (None, None) => return Err(EngineError::Invalid("no subtask proposed".into())),
                };
                let main_id = rs.confirmed_main.clone().unwrap_or_default();
                let sub = tax
                    .lookup_subtask(&id)
                    .ok()
                    .filter(|sub| sub.parent_id == main_id && !rs.episode.rejected_sub.contains(&sub.id))
                    .ok_or_else(|| EngineError::Invalid(format!("{id:?} is not a subtask of {main_id:?}")))?;
                let doc = self
                    .docs
                    .get_or_stitch(&sub.fragment_ids, s.language, &self.fragments)?;
                rs.confirmed_sub = Some(id.clone());
                s.turns.push(ChatMessage::user(format!("confirm {id}")));
                s.active_subtask = Some(id);
                s.active_doc = Some(doc.doc_id.clone());
                s.phase = Phase::ViewingDoc;
                Ok(vec![Effect::DocumentReady {
                    doc_id: doc.doc_id.clone(),
                    fragment_ids: doc.fragment_ids.clone(),
                }])
            }
            (Phase::ViewingDoc | Phase::Qa, Event::Question { text }) => self.question(s, text),
            (Phase::Qa | Phase::ViewingDoc, Event::AcceptReroute) if s.pending_reroute.is_some() => {
                let query = s.pending_reroute.take().expect("checked above").query;
                s.turns.push(ChatMessage::user(format!("search again: {query}")));
                Ok(vec![self.start_routing(s, query)?])
            }
            (Phase::Qa | Phase::ViewingDoc, Event::DeclineReroute) if s.pending_reroute.is_some() => {
                s.pending_reroute = None;
                Ok(vec![Effect::Notice {
                    text: "Staying with the current document.".into(),
                }])
            }
            (p, Event::Command { text }) if !p.is_command() => {
                let title = s
                    .active_subtask
                    .as_deref()
                    .and_then(|id| self.taxonomy.current().lookup_subtask(id).ok().map(|t| t.title(s.language).to_string()));
                let need = match title {
                    Some(t) => format!("{text} {t}"),
                    None => text.clone(),
                };
                let registry = self.registry.current();
                let rec = recommender::recommend(
                    &need,
                    &registry,
                    &*self.backend,
                    self.settings.recommend_method,
                    s.language,
                    self.settings.top_k,
                )?;
                s.turns.push(ChatMessage::user(format!("{COMMAND_PREFIX} {text}")));
                let items = rec
                    .ranked
                    .iter()
                    .map(|(id, score)| RankedPlugin {
                        plugin_id: id.clone(),
                        display_name: registry
                            .get(id)
                            .map(|m| m.display_name_in(s.language).to_string())
                            .unwrap_or_default(),
                        score: *score,
                    })
                    .collect();
                let effect = Effect::Recommendations {
                    method: rec.method,
                    fallback: rec.fallback,
                    items,
                };
                s.command = Some(CommandState {
                    return_phase: p,
                    text: text.clone(),
                    need,
                    form: None,
                });
                s.recommendation = Some(rec);
                s.phase = Phase::Recommending;
                Ok(vec![effect])
            }
            (Phase::Recommending, Event::ConfirmPlugin { plugin_id, override_ranking }) => {
                let registry = self.registry.current();
                let rec = s.recommendation.as_ref().expect("recommendation in recommending phase");
                let id = match plugin_id {
                    Some(id) => id.clone(),
                    None => rec
                        .top()
                        .ok_or_else(|| EngineError::Invalid("nothing was recommended".into()))?
                        .to_string(),
                };
                let confirmed = rec.confirm(&id, *override_ranking, &registry)?;
                let manifest = registry.get(&id).expect("confirmed plugins are registered");
                let form = elicit(manifest);
                s.turns.push(ChatMessage::user(format!("use {id}")));
                s.recommendation = Some(confirmed);
                if let Some(c) = s.command.as_mut() {
                    c.form = Some(form.clone());
                }
                s.phase = Phase::Eliciting;
                Ok(vec![Effect::Form { form }])
            }
            (Phase::Recommending | Phase::Eliciting, Event::Cancel) => {
                s.phase = s.command.take().map(|c| c.return_phase).unwrap_or(Phase::Idle);
                Ok(vec![Effect::Notice {
                    text: "Command cancelled.".into(),
                }])
            }
            (Phase::RoutingMain | Phase::RoutingSub | Phase::ViewingDoc | Phase::Qa, Event::Cancel) => {
                s.phase = Phase::Idle;
                s.routing_state = None;
                s.active_doc = None;
                s.active_subtask = None;
                s.pending_reroute = None;
                Ok(vec![Effect::Notice {
                    text: "Back to the start.".into(),
                }])
            }
            _ => Err(illegal(phase, &event)),
        }
    }

    fn question(&self, s: &mut Session, text: &str) -> Result<Vec<Effect>, EngineError> {
        let rules = &self.settings.bottleneck;
        let doc = self.ensure_document(s).ok_or_else(|| {
            EngineError::Invalid(format!("document {:?} cannot be rebuilt", s.active_doc))
        })?;
        let mut effects = Vec::new();
        let signal = if let Some(signal) = qa::detect_bottleneck(&[], text, rules) {
            s.turns.push(ChatMessage::user(text.to_string()));
            let query = text
                .trim_start()
                .strip_prefix(rules.topic_marker.as_str())
                .unwrap_or(text)
                .trim()
                .to_string();
            Some((signal, query))
        } else {
            let exchange = qa::answer(text, &qa_context(&doc), &self.augmentations.all(), &*self.backend)?;
            s.turns.push(ChatMessage::user(text.to_string()));
            effects.push(Effect::Answer {
                text: exchange.answer.clone(),
                grounded: exchange.grounded,
                cited: exchange.cited_fragments.clone(),
            });
            s.qa_history.push(exchange);
            let recent = &s.qa_history[s.bottleneck_mark.min(s.qa_history.len())..];
            qa::detect_bottleneck(recent, "", rules).map(|sig| (sig, text.trim().to_string()))
        };
        s.phase = Phase::Qa;

        if let Some((signal, query)) = signal {
            s.bottleneck_mark = s.qa_history.len();
            let (notes_added, augment_error) = if self.settings.auto_augment {
                let hint = s.active_subtask.clone().unwrap_or_default();
                match qa::augment_from_log(
                    &s.turns,
                    &*self.backend,
                    &self.augmentations,
                    &s.session_id,
                    &hint,
                    self.settings.max_notes,
                ) {
                    Ok(records) => (records.len(), None),
                    Err(e) => {
                        tracing::warn!("augmentation failed: {e}");
                        (0, Some(e.to_string()))
                    }
                }
            } else {
                (0, None)
            };
            effects.push(Effect::Bottleneck {
                kind: signal.kind,
                evidence: signal.evidence.clone(),
                notes_added,
                augment_error,
                reroute_query: query.clone(),
            });
            s.pending_reroute = Some(PendingReroute { signal, query });
        }
        Ok(effects)
    }
}

/// Structural invariants every reachable session satisfies.
pub fn check_invariants(s: &Session) -> Result<(), String> {
    let doc_phase = match s.phase {
        Phase::ViewingDoc | Phase::Qa => true,
        p if p.is_command() => {
            let ret = s.command.as_ref().map(|c| c.return_phase);
            matches!(ret, Some(Phase::ViewingDoc | Phase::Qa))
        }
        _ => false,
    };
    if doc_phase != s.active_doc.is_some() {
        return Err(format!("active_doc {:?} in phase {}", s.active_doc, s.phase));
    }
    if matches!(s.phase, Phase::RoutingMain | Phase::RoutingSub) && s.routing_state.is_none() {
        return Err("routing phase without routing state".into());
    }
    if s.phase == Phase::RoutingSub
        && s.routing_state.as_ref().and_then(|r| r.confirmed_main.as_ref()).is_none()
    {
        return Err("routing_sub without a confirmed main task".into());
    }
    if s.phase.is_command() != s.command.is_some() {
        return Err(format!("command state mismatch in phase {}", s.phase));
    }
    if s.pending_reroute.is_some() && !matches!(s.phase, Phase::Qa | Phase::ViewingDoc) && !s.phase.is_command() {
        return Err("pending re-route outside qa".into());
    }
    Ok(())
}
