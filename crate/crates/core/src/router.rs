//! Two-stage task selection: pick 1–3 main tasks for a query, then one
//! subtask inside the main task the user confirmed.
//!
//! Model output is never trusted as-is. The reply is read as an id list and
//! repaired in a fixed order: unknown or rejected ids are dropped, duplicates
//! removed keeping the first, and the remainder truncated. If nothing
//! survives, a lexical ranking (Jaccard over token sets, ties by id) picks
//! the single best candidate instead.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::llm::{ChatMessage, CompletionRequest, GatewayError, LlmBackend, Purpose, Role};
use crate::taxonomy::TaskTaxonomy;
use crate::text::{jaccard, token_set};
use crate::Language;

pub const DEFAULT_MAX_ROUNDS: u32 = 3;
pub const MAX_MAIN_CANDIDATES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum RouterError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("routing round {round} exceeds the limit of {max_rounds}")]
    RoundsExhausted { round: u32, max_rounds: u32 },
    #[error("every candidate has been rejected")]
    NoCandidatesLeft,
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("unknown main task {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainSelection {
    pub candidates: Vec<String>,
    pub rationale_text: String,
    pub round: u32,
    /// True when the model reply was unusable and lexical ranking chose.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubSelection {
    pub main_id: String,
    pub subtask_id: String,
    pub rationale_text: String,
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackScope {
    Main,
    Sub,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionFeedback {
    pub rejected_ids: Vec<String>,
    pub reason: String,
    pub scope: FeedbackScope,
}

impl RejectionFeedback {
    pub fn validate(&self) -> Result<(), RouterError> {
        if self.rejected_ids.is_empty() {
            return Err(RouterError::InvalidFeedback("no ids rejected".into()));
        }
        if self.reason.trim().is_empty() {
            return Err(RouterError::InvalidFeedback("a reason is required".into()));
        }
        Ok(())
    }
}

/// State of one routing pass. Rejections only grow; the round counter is
/// shared by both stages so an episode ends within `max_rounds` rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingEpisode {
    pub rejected_main: BTreeSet<String>,
    pub rejected_sub: BTreeSet<String>,
    pub main_reasons: Vec<String>,
    pub sub_reasons: Vec<String>,
    pub round: u32,
    pub max_rounds: u32,
}

impl RoutingEpisode {
    pub fn new(max_rounds: u32) -> Self {
        Self {
            rejected_main: BTreeSet::new(),
            rejected_sub: BTreeSet::new(),
            main_reasons: Vec::new(),
            sub_reasons: Vec::new(),
            round: 1,
            max_rounds,
        }
    }

    /// Records a rejection and opens the next round. Leaves the episode
    /// untouched on error.
    pub fn apply_feedback(&mut self, feedback: &RejectionFeedback) -> Result<u32, RouterError> {
        feedback.validate()?;
        let next = self.round + 1;
        if next > self.max_rounds {
            return Err(RouterError::RoundsExhausted {
                round: next,
                max_rounds: self.max_rounds,
            });
        }
        let (set, reasons) = match feedback.scope {
            FeedbackScope::Main => (&mut self.rejected_main, &mut self.main_reasons),
            FeedbackScope::Sub => (&mut self.rejected_sub, &mut self.sub_reasons),
        };
        set.extend(feedback.rejected_ids.iter().cloned());
        reasons.push(feedback.reason.clone());
        self.round = next;
        Ok(next)
    }

    fn check_round(&self) -> Result<(), RouterError> {
        if self.round > self.max_rounds {
            return Err(RouterError::RoundsExhausted {
                round: self.round,
                max_rounds: self.max_rounds,
            });
        }
        Ok(())
    }
}

impl Default for RoutingEpisode {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_ROUNDS)
    }
}

/// Reads a model reply as a list of ids and applies the repair rules:
/// drop ids `allowed` rejects, dedupe keeping the first, keep at most `limit`.
pub fn repair_id_list(raw: &str, allowed: impl Fn(&str) -> bool, limit: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    raw.split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .map(|piece| {
            piece
                .trim_matches(|c: char| !(c.is_ascii_alphanumeric() || c == '-'))
                .to_ascii_lowercase()
        })
        .filter(|id| !id.is_empty() && allowed(id))
        .filter(|id| seen.insert(id.clone()))
        .take(limit)
        .collect()
}

/// Candidates ordered by Jaccard similarity to `query`, best first, ties
/// broken by ascending id.
pub fn lexical_rank<'a>(
    query: &str,
    candidates: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Vec<(String, f64)> {
    let query_tokens = token_set(query);
    let mut scored: Vec<(String, f64)> = candidates
        .into_iter()
        .map(|(id, text)| (id.to_string(), jaccard(&query_tokens, &token_set(text))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

const MAIN_INSTRUCTIONS: &str = "You route requests for a PCB design assistant. \
Pick the 1 to 3 most relevant main tasks from the list below. \
Reply with their ids only, comma-separated, best first.";

const SUB_INSTRUCTIONS: &str = "You help the user pick the subtask that fits their need. \
Reply with exactly one subtask id from the list below.";

const REJECTION_PREFIX: &str = "Earlier suggestions were rejected because:";

fn with_reasons(text: &str, reasons: &[String]) -> String {
    if reasons.is_empty() {
        return text.to_string();
    }
    let mut out = format!("{text}\n\n{REJECTION_PREFIX}");
    for r in reasons {
        out.push_str("\n- ");
        out.push_str(r);
    }
    out
}

pub struct Router<'a> {
    backend: &'a dyn LlmBackend,
    language: Language,
}

impl<'a> Router<'a> {
    pub fn new(backend: &'a dyn LlmBackend, language: Language) -> Self {
        Self { backend, language }
    }

    pub fn select_main(
        &self,
        query: &str,
        taxonomy: &TaskTaxonomy,
        episode: &RoutingEpisode,
    ) -> Result<MainSelection, RouterError> {
        if query.trim().is_empty() {
            return Err(RouterError::EmptyQuery);
        }
        episode.check_round()?;
        let available: Vec<_> = taxonomy
            .main_tasks
            .iter()
            .filter(|m| !episode.rejected_main.contains(&m.id))
            .collect();
        if available.is_empty() {
            return Err(RouterError::NoCandidatesLeft);
        }

        let digest = available
            .iter()
            .map(|m| format!("{} | {} | {}", m.id, m.title(self.language), m.description(self.language)))
            .collect::<Vec<_>>()
            .join("\n");
        let request = CompletionRequest::new(
            Purpose::RouteMain,
            vec![
                ChatMessage::system(format!("{MAIN_INSTRUCTIONS}\n\n{digest}")),
                ChatMessage::user(with_reasons(query, &episode.main_reasons)),
            ],
        );
        let reply = self.backend.complete(&request)?;
        let known: HashSet<&str> = available.iter().map(|m| m.id.as_str()).collect();
        let mut candidates = repair_id_list(&reply, |id| known.contains(id), MAX_MAIN_CANDIDATES);
        let fallback = candidates.is_empty();
        if fallback {
            let ranked = lexical_rank(
                query,
                available.iter().map(|m| (m.id.as_str(), m.description(self.language))),
            );
            candidates = ranked.into_iter().take(1).map(|(id, _)| id).collect();
        }
        Ok(MainSelection {
            candidates,
            rationale_text: reply,
            round: episode.round,
            fallback,
        })
    }

    pub fn select_sub(
        &self,
        main_id: &str,
        dialogue: &[ChatMessage],
        taxonomy: &TaskTaxonomy,
        episode: &RoutingEpisode,
    ) -> Result<SubSelection, RouterError> {
        episode.check_round()?;
        let main = taxonomy
            .main_task(main_id)
            .map_err(|_| RouterError::UnknownTask(main_id.to_string()))?;
        let available: Vec<_> = main
            .subtasks
            .iter()
            .filter(|s| !episode.rejected_sub.contains(&s.id))
            .collect();
        if available.is_empty() {
            return Err(RouterError::NoCandidatesLeft);
        }

        let digest = available
            .iter()
            .map(|s| format!("{} | {} | {}", s.id, s.title(self.language), s.description(self.language)))
            .collect::<Vec<_>>()
            .join("\n");
        let mut messages = vec![ChatMessage::system(format!(
            "{SUB_INSTRUCTIONS}\n\nMain task: {} ({})\n{digest}",
            main.id,
            main.title(self.language)
        ))];
        messages.extend(
            dialogue
                .iter()
                .filter(|m| m.role != Role::System && !m.content.trim().is_empty())
                .cloned(),
        );
        match messages.iter_mut().rev().find(|m| m.role == Role::User) {
            Some(last) => last.content = with_reasons(&last.content, &episode.sub_reasons),
            None => messages.push(ChatMessage::user(with_reasons(
                &format!("Help me choose a subtask of {}.", main.id),
                &episode.sub_reasons,
            ))),
        }
        let reply = self
            .backend
            .complete(&CompletionRequest::new(Purpose::RouteSub, messages))?;

        let known: HashSet<&str> = available.iter().map(|s| s.id.as_str()).collect();
        let picked = repair_id_list(&reply, |id| known.contains(id), 1);
        let (subtask_id, fallback) = match picked.into_iter().next() {
            Some(id) => (id, false),
            None => {
                let user_text = dialogue
                    .iter()
                    .filter(|m| m.role == Role::User)
                    .map(|m| m.content.as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let ranked = lexical_rank(
                    &user_text,
                    available.iter().map(|s| (s.id.as_str(), s.description(self.language))),
                );
                (ranked[0].0.clone(), true)
            }
        };
        Ok(SubSelection {
            main_id: main.id.clone(),
            subtask_id,
            rationale_text: reply,
            fallback,
        })
    }
}
