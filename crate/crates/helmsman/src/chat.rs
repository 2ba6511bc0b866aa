//! Headless chat: feeds input lines through the engine and renders a
//! plain-text transcript that is stable across runs.
//!
//! Free text is classified by the session phase. Lines starting with `:`
//! are UI actions:
//!
//! ```text
//! :confirm [id]            confirm the proposed main task, subtask or plugin
//! :pick <plugin-id>        choose a plugin outside the ranking
//! :reject [id,id] | why    reject candidates with a reason
//! :view                    open the tailored document
//! :args k=v "k2=a b"       submit plugin arguments and run
//! :accept / :decline       answer a re-route offer
//! :cancel                  leave the current flow
//! :workspace               show the workspace version
//! ```
//!
//! Blank lines and lines starting with `#` are skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use helmsman_core::engine::Engine;
use helmsman_core::plugins::ParamValue;
use helmsman_core::session::{Event, Phase, Session};

/// Session id used by headless runs; the workspace shares it.
pub const CHAT_SESSION_ID: &str = "chat";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ActionError(pub String);

enum Action {
    Event(Event),
    View,
    Workspace,
}

fn split_args(s: &str) -> Result<Vec<String>, ActionError> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut has_token = false;
    for c in s.chars() {
        match c {
            '"' => {
                in_quotes = !in_quotes;
                has_token = true;
            }
            c if c.is_whitespace() && !in_quotes => {
                if has_token {
                    out.push(std::mem::take(&mut cur));
                    has_token = false;
                }
            }
            c => {
                cur.push(c);
                has_token = true;
            }
        }
    }
    if in_quotes {
        return Err(ActionError("unterminated quote".into()));
    }
    if has_token {
        out.push(cur);
    }
    Ok(out)
}

/// Arguments arrive as text; the registry coerces them to the declared kinds.
pub fn parse_args(s: &str) -> Result<BTreeMap<String, ParamValue>, ActionError> {
    let mut args = BTreeMap::new();
    for token in split_args(s)? {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| ActionError(format!("expected name=value, got {token:?}")))?;
        if args.insert(k.to_string(), ParamValue::String(v.to_string())).is_some() {
            return Err(ActionError(format!("argument {k:?} given twice")));
        }
    }
    Ok(args)
}

fn parse_action(session: &Session, line: &str) -> Result<Action, ActionError> {
    let body = line.trim().trim_start_matches(':');
    let (verb, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
    let rest = rest.trim();
    let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
    Ok(Action::Event(match verb {
        "confirm" => match session.phase {
            Phase::RoutingMain => Event::ConfirmMain { main_id: opt(rest) },
            Phase::RoutingSub => Event::ConfirmSub { subtask_id: opt(rest) },
            Phase::Recommending => Event::ConfirmPlugin {
                plugin_id: opt(rest),
                override_ranking: false,
            },
            // let the engine report the illegal transition
            _ => Event::ConfirmMain { main_id: opt(rest) },
        },
        "pick" => Event::ConfirmPlugin {
            plugin_id: Some(rest.to_string()).filter(|s| !s.is_empty()),
            override_ranking: true,
        },
        "reject" => {
            let (ids, reason) = rest.split_once('|').unwrap_or(("", rest));
            Event::Reject {
                ids: ids
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect(),
                reason: reason.trim().to_string(),
            }
        }
        "args" => Event::SubmitArguments { args: parse_args(rest)? },
        "accept" => Event::AcceptReroute,
        "decline" => Event::DeclineReroute,
        "cancel" => Event::Cancel,
        "view" => return Ok(Action::View),
        "workspace" => return Ok(Action::Workspace),
        other => return Err(ActionError(format!("unknown action :{other}"))),
    }))
}

/// Drives one session through `lines`, returning the transcript and the
/// final session.
pub struct Chat<'a> {
    pub engine: &'a Engine,
    pub session: Session,
    pub errors: usize,
}

impl<'a> Chat<'a> {
    pub fn new(engine: &'a Engine, session: Session) -> Self {
        Self {
            engine,
            session,
            errors: 0,
        }
    }

    /// Handles one input line and returns the rendered block, or `None` for
    /// skipped lines.
    pub fn step(&mut self, line: &str) -> Option<String> {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            return None;
        }
        let mut out = format!("> {trimmed}\n");
        let action = if trimmed.starts_with(':') {
            parse_action(&self.session, trimmed)
        } else {
            Ok(Action::Event(Engine::classify(&self.session, trimmed)))
        };
        match action {
            Err(e) => {
                self.errors += 1;
                let _ = writeln!(out, "error [bad_action]: {e}");
            }
            Ok(Action::View) => match self.session.active_doc.as_deref().and_then(|id| self.engine.document(id)) {
                Some(doc) => {
                    let fragments = self.engine.fragments.clone();
                    let titles: Vec<&str> = doc
                        .fragment_ids
                        .iter()
                        .filter_map(|id| fragments.get(id, doc.language).map(|f| f.title.as_str()))
                        .collect();
                    let _ = writeln!(
                        out,
                        "Viewing document {} ({} bytes): {}",
                        doc.doc_id,
                        doc.html.len(),
                        titles.join(" / ")
                    );
                }
                None => {
                    self.errors += 1;
                    let _ = writeln!(out, "error [no_document]: no document is open");
                }
            },
            Ok(Action::Workspace) => {
                let ws = self
                    .engine
                    .workspaces
                    .get_or_create(&self.session.session_id, &self.engine.workspace_template);
                let ws = ws.lock().unwrap_or_else(|p| p.into_inner());
                let _ = writeln!(
                    out,
                    "Workspace {}: version {}, {} items, {}",
                    ws.id,
                    ws.state.version,
                    ws.state.items.len(),
                    if ws.state.dirty { "unsaved changes" } else { "clean" }
                );
            }
            Ok(Action::Event(event)) => match self.engine.advance(&self.session, event) {
                Ok(adv) => {
                    self.session = adv.session;
                    for e in &adv.effects {
                        let _ = writeln!(out, "{}", e.describe());
                    }
                }
                Err(e) => {
                    self.errors += 1;
                    let _ = writeln!(out, "error [{}]: {}", e.code(), e);
                }
            },
        }
        Some(out)
    }

    /// Runs every line; blocks are separated by a blank line.
    pub fn run<'l>(&mut self, lines: impl IntoIterator<Item = &'l str>) -> String {
        let blocks: Vec<String> = lines.into_iter().filter_map(|l| self.step(l)).collect();
        blocks.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn args_split_on_whitespace_outside_quotes() {
        let a = parse_args(r#"text="REV A" layer=F.SilkS"#).unwrap();
        assert_eq!(a["text"], ParamValue::String("REV A".into()));
        assert_eq!(a["layer"], ParamValue::String("F.SilkS".into()));
        assert!(parse_args("text=\"open").is_err());
        assert!(parse_args("novalue").is_err());
        assert!(parse_args("a=1 a=2").is_err());
        assert!(parse_args("").unwrap().is_empty());
        assert_eq!(parse_args("empty=").unwrap()["empty"], ParamValue::String(String::new()));
    }

    #[test]
    fn reject_action_parses_ids_and_reason() {
        let s = Session::with_id("t", helmsman_core::Language::En);
        let Ok(Action::Event(Event::Reject { ids, reason })) = parse_action(&s, ":reject routing, drc | wrong area") else {
            panic!("expected reject");
        };
        assert_eq!(ids, vec!["routing", "drc"]);
        assert_eq!(reason, "wrong area");
        let Ok(Action::Event(Event::Reject { ids, reason })) = parse_action(&s, ":reject not what I meant") else {
            panic!("expected reject");
        };
        assert!(ids.is_empty());
        assert_eq!(reason, "not what I meant");
        assert!(parse_action(&s, ":dance").is_err());
    }
}
