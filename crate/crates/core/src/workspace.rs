//! The simulated design workspace that plugins act on.
//!
//! On disk a workspace is plain text:
//!
//! ```text
//! version = 3
//! dirty = false
//!
//! [track-1]
//! kind = track
//! layer = "F.Cu"
//! corner_style = "sharp"
//! ```
//!
//! Item sections are written in id order and properties in key order, so
//! equal states always serialize to identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::is_valid_slug;
use crate::plugins::{is_valid_param_name, parse_value, quote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Track,
    Pad,
    Footprint,
    Text,
}

impl ItemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemKind::Track => "track",
            ItemKind::Pad => "pad",
            ItemKind::Footprint => "footprint",
            ItemKind::Text => "text",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "track" => ItemKind::Track,
            "pad" => ItemKind::Pad,
            "footprint" => ItemKind::Footprint,
            "text" => ItemKind::Text,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub kind: ItemKind,
    #[serde(default)]
    pub properties: BTreeMap<String, String>,
}

impl Item {
    pub fn new(kind: ItemKind) -> Self {
        Self {
            kind,
            properties: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.properties.insert(key.into(), value.into());
        self
    }

    pub fn prop(&self, key: &str) -> Option<&str> {
        self.properties.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceState {
    pub version: u64,
    pub dirty: bool,
    pub items: BTreeMap<String, Item>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Added,
    Removed,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub item_id: String,
    pub change: ChangeKind,
    pub before: Option<Item>,
    pub after: Option<Item>,
}

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(u64),
    #[error("diff does not apply to item {0:?}")]
    DiffConflict(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl WorkspaceState {
    pub fn parse(text: &str) -> Result<Self, WorkspaceError> {
        let mut state = WorkspaceState::default();
        let mut seen_header = (false, false);
        let mut current: Option<(String, Option<ItemKind>, BTreeMap<String, String>, usize)> = None;

        fn finish(
            state: &mut WorkspaceState,
            cur: Option<(String, Option<ItemKind>, BTreeMap<String, String>, usize)>,
        ) -> Result<(), WorkspaceError> {
            if let Some((id, kind, properties, line)) = cur {
                let kind = kind.ok_or_else(|| WorkspaceError::Parse {
                    line,
                    message: format!("item {id:?} has no kind"),
                })?;
                state.items.insert(id, Item { kind, properties });
            }
            Ok(())
        }

        for (idx, raw) in text.lines().enumerate() {
            let n = idx + 1;
            let err = |message: String| WorkspaceError::Parse { line: n, message };
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if let Some(h) = t.strip_prefix('[') {
                let id = h
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated item header".into()))?
                    .trim()
                    .to_string();
                if !is_valid_slug(&id) {
                    return Err(err(format!("invalid item id {id:?}")));
                }
                if state.items.contains_key(&id) || current.as_ref().is_some_and(|c| c.0 == id) {
                    return Err(err(format!("duplicate item id {id:?}")));
                }
                finish(&mut state, current.take())?;
                current = Some((id, None, BTreeMap::new(), n));
                continue;
            }
            let (key, value) = t
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {t:?}")))?;
            let key = key.trim();
            let value = parse_value(value).map_err(err)?;
            match current.as_mut() {
                None => match key {
                    "version" if !seen_header.0 => {
                        seen_header.0 = true;
                        state.version = value
                            .parse()
                            .map_err(|_| err(format!("bad version {value:?}")))?;
                    }
                    "dirty" if !seen_header.1 => {
                        seen_header.1 = true;
                        state.dirty = match value.as_str() {
                            "true" => true,
                            "false" => false,
                            _ => return Err(err(format!("bad dirty flag {value:?}"))),
                        };
                    }
                    _ => return Err(err(format!("unexpected header key {key:?}"))),
                },
                Some((_, kind, props, _)) => {
                    if key == "kind" {
                        if kind.is_some() {
                            return Err(err("duplicate kind".into()));
                        }
                        *kind = Some(
                            ItemKind::parse(&value)
                                .ok_or_else(|| err(format!("unknown item kind {value:?}")))?,
                        );
                    } else {
                        if !is_valid_param_name(key) {
                            return Err(err(format!("invalid property name {key:?}")));
                        }
                        if props.insert(key.to_string(), value).is_some() {
                            return Err(err(format!("duplicate property {key:?}")));
                        }
                    }
                }
            }
        }
        finish(&mut state, current)?;
        Ok(state)
    }

    pub fn render(&self) -> String {
        let mut out = format!("version = {}\ndirty = {}\n", self.version, self.dirty);
        for (id, item) in &self.items {
            let _ = write!(out, "\n[{id}]\nkind = {}\n", item.kind.as_str());
            for (k, v) in &item.properties {
                let _ = writeln!(out, "{k} = {}", quote(v));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, WorkspaceError> {
        let text = std::fs::read_to_string(path).map_err(|source| WorkspaceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorkspaceError> {
        std::fs::write(path, self.render()).map_err(|source| WorkspaceError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn items_of(&self, kind: ItemKind) -> impl Iterator<Item = (&String, &Item)> {
        self.items.iter().filter(move |(_, i)| i.kind == kind)
    }
}

/// Item-level differences from `before` to `after`, in id order.
pub fn diff(before: &WorkspaceState, after: &WorkspaceState) -> Vec<DiffEntry> {
    let mut out = Vec::new();
    let ids: std::collections::BTreeSet<&String> =
        before.items.keys().chain(after.items.keys()).collect();
    for id in ids {
        let (b, a) = (before.items.get(id), after.items.get(id));
        let change = match (b, a) {
            (None, Some(_)) => ChangeKind::Added,
            (Some(_), None) => ChangeKind::Removed,
            (Some(x), Some(y)) if x != y => ChangeKind::Modified,
            _ => continue,
        };
        out.push(DiffEntry {
            item_id: id.clone(),
            change,
            before: b.cloned(),
            after: a.cloned(),
        });
    }
    out
}

/// Applies `entries` to the items of `state`. Every entry's `before` must
/// match the current item exactly.
pub fn apply_diff(state: &WorkspaceState, entries: &[DiffEntry]) -> Result<WorkspaceState, WorkspaceError> {
    let mut next = state.clone();
    for e in entries {
        if next.items.get(&e.item_id) != e.before.as_ref() {
            return Err(WorkspaceError::DiffConflict(e.item_id.clone()));
        }
        match &e.after {
            Some(item) => next.items.insert(e.item_id.clone(), item.clone()),
            None => next.items.remove(&e.item_id),
        };
    }
    Ok(next)
}

/// A workspace with a linear snapshot history.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub id: String,
    pub state: WorkspaceState,
    snapshots: Vec<(u64, String)>,
    next_token: u64,
}

impl Workspace {
    pub fn new(id: impl Into<String>, state: WorkspaceState) -> Self {
        Self {
            id: id.into(),
            state,
            snapshots: Vec::new(),
            next_token: 1,
        }
    }

    pub fn snapshot(&mut self) -> u64 {
        let token = self.next_token;
        self.next_token += 1;
        self.snapshots.push((token, self.state.render()));
        token
    }

    /// Restores the state saved under `token`. Later snapshots are discarded;
    /// `token` itself stays valid.
    pub fn rollback(&mut self, token: u64) -> Result<(), WorkspaceError> {
        let pos = self
            .snapshots
            .iter()
            .position(|(t, _)| *t == token)
            .ok_or(WorkspaceError::UnknownSnapshot(token))?;
        self.state = WorkspaceState::parse(&self.snapshots[pos].1)?;
        self.snapshots.truncate(pos + 1);
        Ok(())
    }

    /// Drops all snapshots once an execution has been committed.
    pub fn clear_snapshots(&mut self) {
        self.snapshots.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WorkspaceState {
        let mut s = WorkspaceState {
            version: 2,
            dirty: false,
            items: BTreeMap::new(),
        };
        s.items.insert(
            "track-1".into(),
            Item::new(ItemKind::Track).with("layer", "F.Cu").with("note", "a \"quoted\"\nline"),
        );
        s.items.insert("pad-1".into(), Item::new(ItemKind::Pad));
        s
    }

    #[test]
    fn render_parse_round_trip() {
        let s = sample();
        let text = s.render();
        assert_eq!(WorkspaceState::parse(&text).unwrap(), s);
        assert!(text.find("[pad-1]").unwrap() < text.find("[track-1]").unwrap());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            WorkspaceState::parse("[a]\nlayer = x\n"),
            Err(WorkspaceError::Parse { line: 1, .. })
        ));
        assert!(WorkspaceState::parse("[a]\nkind = via\n").is_err());
        assert!(WorkspaceState::parse("[a]\nkind = pad\n[a]\nkind = pad\n").is_err());
        assert!(WorkspaceState::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn diff_and_replay() {
        let before = sample();
        let mut after = before.clone();
        after.items.remove("pad-1");
        after.items.get_mut("track-1").unwrap().properties.insert("w".into(), "3".into());
        after.items.insert("text-1".into(), Item::new(ItemKind::Text));
        let d = diff(&before, &after);
        let kinds: Vec<_> = d.iter().map(|e| e.change).collect();
        assert_eq!(kinds, [ChangeKind::Removed, ChangeKind::Added, ChangeKind::Modified]);
        assert_eq!(apply_diff(&before, &d).unwrap().items, after.items);
        assert!(matches!(apply_diff(&after, &d), Err(WorkspaceError::DiffConflict(_))));
        assert!(diff(&before, &before).is_empty());
    }

    #[test]
    fn snapshot_rollback_linear() {
        let mut ws = Workspace::new("w", sample());
        let original = ws.state.render();
        let first = ws.snapshot();
        ws.state.items.clear();
        let second = ws.snapshot();
        ws.state.version = 99;
        ws.rollback(first).unwrap();
        assert_eq!(ws.state.render(), original);
        assert!(matches!(ws.rollback(second), Err(WorkspaceError::UnknownSnapshot(_))));
        assert!(matches!(ws.rollback(12345), Err(WorkspaceError::UnknownSnapshot(12345))));
    }
}
