//! Grounded question answering over the active tailored document, bottleneck
//! detection, and the append-only store of notes distilled from chat logs.

use std::collections::{BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::{ChatMessage, CompletionRequest, GatewayError, LlmBackend, Purpose, Role};

pub const NOTES_HEADING: &str = "Previously learned notes";
/// Upper bound on the characters of notes injected into one prompt.
pub const NOTES_CAP_CHARS: usize = 2000;
pub const DEFAULT_MAX_NOTES: usize = 5;

const GROUNDING_INSTRUCTIONS: &str = "You answer questions about a PCB design tool using the \
documentation below. Cite every fragment you rely on as [fragment-id], using the ids from the \
`== fragment-id ==` marker lines. If the documentation does not cover the question, say so \
and cite nothing.";

const DISTILL_INSTRUCTIONS: &str = "Distill the conversation below into short factual notes \
that would help answer future questions. Write one note per line, at most";

#[derive(Debug, thiserror::Error)]
pub enum QaError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("chat log is empty")]
    EmptyLog,
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("augmentation store {path}: {message}")]
    Store { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExchange {
    pub question: String,
    pub answer: String,
    pub cited_fragments: Vec<String>,
    pub grounded: bool,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationSource {
    ChatLog,
    UserNote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub record_id: String,
    pub source: AugmentationSource,
    pub topic_hint: String,
    pub content: String,
    pub session_id: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckKind {
    ExplicitTopicShift,
    RepeatedUnanswered,
    LowGrounding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSignal {
    pub kind: BottleneckKind,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BottleneckRules {
    /// Consecutive ungrounded answers that count as a dead end.
    pub consecutive_ungrounded: usize,
    pub topic_marker: String,
    /// Exchanges considered by the low-grounding rule; it stays silent until
    /// this many exist.
    pub window: usize,
    pub min_grounded_fraction: f64,
}

impl Default for BottleneckRules {
    fn default() -> Self {
        Self {
            consecutive_ungrounded: 3,
            topic_marker: "/topic".into(),
            window: 5,
            min_grounded_fraction: 0.4,
        }
    }
}

fn citation_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([a-z0-9-]{1,64})\]").expect("static regex"))
}

/// Bracketed fragment ids in order of first appearance.
pub fn parse_citations(answer: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    citation_regex()
        .captures_iter(answer)
        .map(|c| c[1].to_string())
        .filter(|id| seen.insert(id.clone()))
        .collect()
}

/// Fragment ids announced by `== id ==` marker lines in a QA context.
pub fn context_fragment_ids(context: &str) -> BTreeSet<String> {
    context
        .lines()
        .filter_map(|l| l.strip_prefix("== ")?.strip_suffix(" =="))
        .map(str::to_string)
        .collect()
}

/// The fenced notes block injected into QA prompts, newest first, capped at
/// [`NOTES_CAP_CHARS`]. `None` when there is nothing to inject.
pub fn notes_section(records: &[AugmentationRecord]) -> Option<String> {
    let mut body = String::new();
    let mut used = 0;
    for r in records.iter().rev() {
        let line = format!("- {}\n", r.content.trim());
        let len = line.chars().count();
        if used + len > NOTES_CAP_CHARS {
            if used == 0 {
                body.extend(line.chars().take(NOTES_CAP_CHARS - 1));
                body.push('\n');
            }
            break;
        }
        used += len;
        body.push_str(&line);
    }
    if body.is_empty() {
        return None;
    }
    Some(format!("{NOTES_HEADING} (most recent first):\n```notes\n{body}```"))
}

pub fn build_prompt(
    question: &str,
    context: &str,
    augmentations: &[AugmentationRecord],
) -> CompletionRequest {
    let mut system = format!("{GROUNDING_INSTRUCTIONS}\n\nDocumentation:\n{context}");
    if let Some(notes) = notes_section(augmentations) {
        system.push_str("\n\n");
        system.push_str(&notes);
    }
    CompletionRequest::new(
        Purpose::QaAnswer,
        vec![ChatMessage::system(system), ChatMessage::user(question)],
    )
}

/// Asks the model and checks its citations against the fragments present in
/// `context`. An answer is grounded only if it cites at least one fragment
/// and every citation resolves.
pub fn answer(
    question: &str,
    context: &str,
    augmentations: &[AugmentationRecord],
    backend: &dyn LlmBackend,
) -> Result<QaExchange, QaError> {
    if question.trim().is_empty() {
        return Err(QaError::EmptyQuestion);
    }
    let reply = backend.complete(&build_prompt(question, context, augmentations))?;
    let present = context_fragment_ids(context);
    let cited = parse_citations(&reply);
    let grounded = !cited.is_empty() && cited.iter().all(|id| present.contains(id));
    Ok(QaExchange {
        question: question.to_string(),
        answer: reply,
        cited_fragments: cited.into_iter().filter(|id| present.contains(id)).collect(),
        grounded,
        timestamp: Utc::now(),
    })
}

fn starts_with_marker(text: &str, marker: &str) -> bool {
    text.trim_start()
        .strip_prefix(marker)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with(char::is_whitespace))
}

/// Checks the rules in order: explicit topic shift, repeated unanswered,
/// low grounding.
pub fn detect_bottleneck(
    recent: &[QaExchange],
    latest_user_text: &str,
    rules: &BottleneckRules,
) -> Option<BottleneckSignal> {
    if !rules.topic_marker.is_empty() && starts_with_marker(latest_user_text, &rules.topic_marker) {
        return Some(BottleneckSignal {
            kind: BottleneckKind::ExplicitTopicShift,
            evidence: latest_user_text.trim().to_string(),
        });
    }
    let k = rules.consecutive_ungrounded;
    if k > 0 && recent.len() >= k && recent[recent.len() - k..].iter().all(|e| !e.grounded) {
        return Some(BottleneckSignal {
            kind: BottleneckKind::RepeatedUnanswered,
            evidence: format!("last {k} answers were not grounded in the documentation"),
        });
    }
    let w = rules.window;
    if w > 0 && recent.len() >= w {
        let grounded = recent[recent.len() - w..].iter().filter(|e| e.grounded).count();
        let fraction = grounded as f64 / w as f64;
        if fraction < rules.min_grounded_fraction {
            return Some(BottleneckSignal {
                kind: BottleneckKind::LowGrounding,
                evidence: format!("{grounded} of the last {w} answers were grounded"),
            });
        }
    }
    None
}

fn strip_bullet(line: &str) -> &str {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")) {
        return rest.trim();
    }
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(". ") {
            return rest.trim();
        }
    }
    line
}

/// Distills `log` into at most `max_notes` notes and appends them to `store`.
/// A reply without usable lines yields no records.
pub fn augment_from_log(
    log: &[ChatMessage],
    backend: &dyn LlmBackend,
    store: &AugmentationStore,
    session_id: &str,
    topic_hint: &str,
    max_notes: usize,
) -> Result<Vec<AugmentationRecord>, QaError> {
    let transcript = log
        .iter()
        .filter(|m| m.role != Role::System)
        .map(|m| {
            let who = match m.role {
                Role::User => "user",
                _ => "assistant",
            };
            format!("{who}: {}", m.content)
        })
        .collect::<Vec<_>>()
        .join("\n");
    if transcript.trim().is_empty() {
        return Err(QaError::EmptyLog);
    }
    let request = CompletionRequest::new(
        Purpose::Augment,
        vec![
            ChatMessage::system(format!("{DISTILL_INSTRUCTIONS} {max_notes}.")),
            ChatMessage::user(transcript),
        ],
    );
    let reply = backend.complete(&request)?;
    let now = Utc::now();
    let records: Vec<_> = reply
        .lines()
        .map(strip_bullet)
        .filter(|l| !l.is_empty())
        .take(max_notes)
        .map(|content| AugmentationRecord {
            record_id: uuid::Uuid::new_v4().to_string(),
            source: AugmentationSource::ChatLog,
            topic_hint: topic_hint.to_string(),
            content: content.to_string(),
            session_id: session_id.to_string(),
            created_at: now,
        })
        .collect();
    store.append(&records)?;
    Ok(records)
}

/// Append-only record store, optionally mirrored to a JSON-lines file.
#[derive(Debug, Default)]
pub struct AugmentationStore {
    records: RwLock<Vec<AugmentationRecord>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl AugmentationStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) the JSON-lines file at `path` and loads
    /// the records already in it.
    pub fn open(path: &Path) -> Result<Self, QaError> {
        let err = |message: String| QaError::Store {
            path: path.to_path_buf(),
            message,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        }
        let mut records = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| err(e.to_string()))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: AugmentationRecord = serde_json::from_str(&line)
                    .map_err(|e| err(format!("line {}: {e}", i + 1)))?;
                records.push(record);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| err(e.to_string()))?;
        Ok(Self {
            records: RwLock::new(records),
            file: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn append(&self, new: &[AugmentationRecord]) -> Result<(), QaError> {
        if new.is_empty() {
            return Ok(());
        }
        let mut records = self.records.write().expect("augmentation lock");
        if let Some((path, file)) = &self.file {
            let mut buf = String::new();
            for r in new {
                buf.push_str(&serde_json::to_string(r).expect("record serializes"));
                buf.push('\n');
            }
            let mut f = file.lock().expect("augmentation file lock");
            f.write_all(buf.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| QaError::Store {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
        }
        records.extend_from_slice(new);
        Ok(())
    }

    pub fn add_note(
        &self,
        session_id: &str,
        topic_hint: &str,
        content: &str,
    ) -> Result<AugmentationRecord, QaError> {
        let record = AugmentationRecord {
            record_id: uuid::Uuid::new_v4().to_string(),
            source: AugmentationSource::UserNote,
            topic_hint: topic_hint.to_string(),
            content: content.trim().to_string(),
            session_id: session_id.to_string(),
            created_at: Utc::now(),
        };
        self.append(std::slice::from_ref(&record))?;
        Ok(record)
    }

    pub fn all(&self) -> Vec<AugmentationRecord> {
        self.records.read().expect("augmentation lock").clone()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("augmentation lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;

    fn ex(grounded: bool) -> QaExchange {
        QaExchange {
            question: "q".into(),
            answer: "a".into(),
            cited_fragments: vec![],
            grounded,
            timestamp: Utc::now(),
        }
    }

    fn record(content: &str) -> AugmentationRecord {
        AugmentationRecord {
            record_id: uuid::Uuid::new_v4().to_string(),
            source: AugmentationSource::ChatLog,
            topic_hint: "t".into(),
            content: content.into(),
            session_id: "s".into(),
            created_at: Utc::now(),
        }
    }

    #[test]
    fn citations_in_order_without_duplicates() {
        assert_eq!(
            parse_citations("see [b-frag] and [a] then [b-frag]; not [Upper] or [x y]"),
            ["b-frag", "a"]
        );
    }

    #[test]
    fn grounded_only_when_all_citations_resolve() {
        let context = "== footprints-intro ==\nOpen the editor";
        let backend = ScriptedBackend::parse(
            "qa_answer\tsubstring\tfootprint editor\tUse the editor [footprints-intro].\n\
             qa_answer\tsubstring\tghost\tSee [ghost-fragment].\n\
             qa_answer\tsubstring\tmixed\t[footprints-intro] and [ghost-fragment]\n\
             qa_answer\tsubstring\tnothing\tI do not know.\n",
        )
        .unwrap();
        let a = answer("how do I open the footprint editor", context, &[], &backend).unwrap();
        assert!(a.grounded);
        assert_eq!(a.cited_fragments, ["footprints-intro"]);

        let a = answer("ghost?", context, &[], &backend).unwrap();
        assert!(!a.grounded);
        assert!(a.cited_fragments.is_empty());

        let a = answer("mixed", context, &[], &backend).unwrap();
        assert!(!a.grounded);
        assert_eq!(a.cited_fragments, ["footprints-intro"]);

        let a = answer("nothing", context, &[], &backend).unwrap();
        assert!(!a.grounded);
        assert!(matches!(answer(" ", context, &[], &backend), Err(QaError::EmptyQuestion)));
    }

    #[test]
    fn bottleneck_rules() {
        let rules = BottleneckRules::default();
        let three_bad = [ex(true), ex(false), ex(false), ex(false)];
        assert_eq!(
            detect_bottleneck(&three_bad, "hm", &rules).unwrap().kind,
            BottleneckKind::RepeatedUnanswered
        );
        assert_eq!(
            detect_bottleneck(&[], "/topic zones", &rules).unwrap().kind,
            BottleneckKind::ExplicitTopicShift
        );
        assert_eq!(detect_bottleneck(&[], "/topical", &rules), None);
        assert_eq!(detect_bottleneck(&[ex(true), ex(true)], "ok", &rules), None);
        // 1 of 5 grounded, never 3 in a row ungrounded
        let low = [ex(false), ex(false), ex(true), ex(false), ex(false)];
        assert_eq!(
            detect_bottleneck(&low, "ok", &rules).unwrap().kind,
            BottleneckKind::LowGrounding
        );
        // 2 of 5 = 0.4 is not below the threshold
        let edge = [ex(false), ex(true), ex(false), ex(true), ex(false)];
        assert_eq!(detect_bottleneck(&edge, "ok", &rules), None);
    }

    #[test]
    fn notes_newest_first_and_capped() {
        let records = vec![record("old"), record("new")];
        let s = notes_section(&records).unwrap();
        assert!(s.find("- new").unwrap() < s.find("- old").unwrap());
        assert!(notes_section(&[]).is_none());

        let long: Vec<_> = (0..100).map(|i| record(&format!("note {i:03} {}", "x".repeat(40)))).collect();
        let s = notes_section(&long).unwrap();
        let body: usize = s.lines().filter(|l| l.starts_with("- ")).map(|l| l.chars().count() + 1).sum();
        assert!(body <= NOTES_CAP_CHARS);
        assert!(s.contains("note 099"));
        assert!(!s.contains("note 000"));
    }

    #[test]
    fn augment_appends_lines() {
        let backend = ScriptedBackend::parse(
            "augment\tsubstring\ttwo\t- shortcut is O\\n\\n2. zones refill with B\n\
             augment\tsubstring\tnone\t\n",
        )
        .unwrap();
        let store = AugmentationStore::in_memory();
        let log = [ChatMessage::user("two notes please")];
        let recs = augment_from_log(&log, &backend, &store, "s1", "routing", 5).unwrap();
        assert_eq!(recs.iter().map(|r| r.content.as_str()).collect::<Vec<_>>(), ["shortcut is O", "zones refill with B"]);
        assert_eq!(store.len(), 2);

        let recs = augment_from_log(&[ChatMessage::user("none")], &backend, &store, "s1", "", 5).unwrap();
        assert!(recs.is_empty());
        assert_eq!(store.len(), 2);
        assert!(matches!(
            augment_from_log(&[], &backend, &store, "s1", "", 5),
            Err(QaError::EmptyLog)
        ));
    }

    #[test]
    fn store_persists_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.jsonl");
        let store = AugmentationStore::open(&path).unwrap();
        store.add_note("s", "t", "remember this").unwrap();
        store.append(&[record("second")]).unwrap();
        drop(store);
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: BTreeSet<_> = first.as_object().unwrap().keys().cloned().collect();
        assert_eq!(
            keys,
            ["content", "created_at", "record_id", "session_id", "source", "topic_hint"]
                .map(String::from)
                .into_iter()
                .collect()
        );
        assert_eq!(first["source"], "user_note");
        let reopened = AugmentationStore::open(&path).unwrap();
        assert_eq!(reopened.len(), 2);
    }
}
