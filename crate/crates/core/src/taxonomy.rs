//! The curated main-task / subtask tree the router selects from.
//!
//! The on-disk form is TOML:
//!
//! ```toml
//! version = 1
//!
//! [[main_task]]
//! id = "routing"
//! title_en = "Track routing"
//! title_zh = "走线布线"
//! description_en = "route copper tracks ..."
//! description_zh = "..."
//!
//! [[main_task.subtask]]
//! id = "diff-pairs"
//! title_en = "Differential pairs"
//! title_zh = "差分对"
//! description_en = "..."
//! description_zh = "..."
//! fragments = ["routing-intro", "diff-pairs"]
//! ```
//!
//! Ids are unique across main tasks and subtasks together.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::{is_valid_slug, Language};

/// Number of main tasks in the shipped default taxonomy.
pub const DEFAULT_MAIN_TASKS: usize = 20;
pub const MAX_MAIN_TASKS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaxonomyError {
    #[error("reading {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("taxonomy parse error: {0}")]
    Parse(String),
    #[error("invalid id {0:?} (expected [a-z0-9-]{{1,64}})")]
    InvalidId(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("main task {0:?} has no subtasks")]
    EmptySubtasks(String),
    #[error("subtask {0:?} references no fragments")]
    EmptyFragments(String),
    #[error("{id:?} is missing a title or description in {language}")]
    MissingText { id: String, language: Language },
    #[error("taxonomy has {0} main tasks (allowed 1..=64)")]
    TaskCount(usize),
    #[error("subtask {sub_id:?} references fragment {fragment_id:?} missing from the {language} corpus")]
    DanglingFragment {
        sub_id: String,
        fragment_id: String,
        language: Language,
    },
    #[error("no task with id {0:?}")]
    NotFound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    pub id: String,
    /// Filled from the enclosing main task when the file is loaded.
    #[serde(skip)]
    pub parent_id: String,
    pub title_en: String,
    pub title_zh: String,
    pub description_en: String,
    pub description_zh: String,
    #[serde(rename = "fragments")]
    pub fragment_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainTask {
    pub id: String,
    pub title_en: String,
    pub title_zh: String,
    pub description_en: String,
    pub description_zh: String,
    #[serde(rename = "subtask", default)]
    pub subtasks: Vec<SubTask>,
}

macro_rules! localized {
    ($t:ty) => {
        impl $t {
            pub fn title(&self, language: Language) -> &str {
                match language {
                    Language::En => &self.title_en,
                    Language::Zh => &self.title_zh,
                }
            }

            pub fn description(&self, language: Language) -> &str {
                match language {
                    Language::En => &self.description_en,
                    Language::Zh => &self.description_zh,
                }
            }

            fn missing_text(&self) -> Option<Language> {
                Language::ALL.into_iter().find(|&l| {
                    self.title(l).trim().is_empty() || self.description(l).trim().is_empty()
                })
            }
        }
    };
}

localized!(MainTask);
localized!(SubTask);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTaxonomy {
    pub version: u64,
    #[serde(rename = "main_task", default)]
    pub main_tasks: Vec<MainTask>,
}

/// Anything that can answer "does fragment `id` exist in `language`".
pub trait FragmentLookup {
    fn has_fragment(&self, id: &str, language: Language) -> bool;
}

impl TaskTaxonomy {
    /// Parses and structurally validates; fragment references are not checked.
    pub fn from_toml_str(text: &str) -> Result<Self, TaxonomyError> {
        let mut taxonomy: TaskTaxonomy =
            toml::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        for main in &mut taxonomy.main_tasks {
            for sub in &mut main.subtasks {
                sub.parent_id = main.id.clone();
            }
        }
        if let Some(first) = taxonomy.problems().into_iter().next() {
            return Err(first);
        }
        Ok(taxonomy)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("taxonomy is always representable as TOML")
    }

    /// Structural problems, in file order.
    pub fn problems(&self) -> Vec<TaxonomyError> {
        let mut out = Vec::new();
        let n = self.main_tasks.len();
        if n == 0 || n > MAX_MAIN_TASKS {
            out.push(TaxonomyError::TaskCount(n));
        }
        let mut ids = HashSet::new();
        let mut check_id = |id: &str, out: &mut Vec<TaxonomyError>| {
            if !is_valid_slug(id) {
                out.push(TaxonomyError::InvalidId(id.to_string()));
            } else if !ids.insert(id.to_string()) {
                out.push(TaxonomyError::DuplicateId(id.to_string()));
            }
        };
        for main in &self.main_tasks {
            check_id(&main.id, &mut out);
            if let Some(language) = main.missing_text() {
                out.push(TaxonomyError::MissingText {
                    id: main.id.clone(),
                    language,
                });
            }
            if main.subtasks.is_empty() {
                out.push(TaxonomyError::EmptySubtasks(main.id.clone()));
            }
            for sub in &main.subtasks {
                check_id(&sub.id, &mut out);
                if let Some(language) = sub.missing_text() {
                    out.push(TaxonomyError::MissingText {
                        id: sub.id.clone(),
                        language,
                    });
                }
                if sub.fragment_ids.is_empty() {
                    out.push(TaxonomyError::EmptyFragments(sub.id.clone()));
                }
                for f in &sub.fragment_ids {
                    if !is_valid_slug(f) {
                        out.push(TaxonomyError::InvalidId(f.clone()));
                    }
                }
            }
        }
        out
    }

    /// Every fragment reference that does not resolve in one of `languages`.
    pub fn dangling_fragments(
        &self,
        corpus: &impl FragmentLookup,
        languages: &[Language],
    ) -> Vec<TaxonomyError> {
        let mut out = Vec::new();
        for sub in self.subtasks() {
            for &language in languages {
                for f in &sub.fragment_ids {
                    if !corpus.has_fragment(f, language) {
                        out.push(TaxonomyError::DanglingFragment {
                            sub_id: sub.id.clone(),
                            fragment_id: f.clone(),
                            language,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn subtasks(&self) -> impl Iterator<Item = &SubTask> {
        self.main_tasks.iter().flat_map(|m| m.subtasks.iter())
    }

    pub fn main_task(&self, id: &str) -> Result<&MainTask, TaxonomyError> {
        self.main_tasks
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| TaxonomyError::NotFound(id.to_string()))
    }

    pub fn lookup_subtask(&self, id: &str) -> Result<&SubTask, TaxonomyError> {
        self.subtasks()
            .find(|s| s.id == id)
            .ok_or_else(|| TaxonomyError::NotFound(id.to_string()))
    }

    /// Prompt material listing the candidate main tasks, one per line in
    /// taxonomy order: `<id> | <title> | <description>`.
    pub fn routing_digest(&self, language: Language) -> String {
        digest_lines(
            self.main_tasks
                .iter()
                .map(|m| (m.id.as_str(), m.title(language), m.description(language))),
        )
    }

    /// Same layout as [`routing_digest`](Self::routing_digest), restricted to
    /// the subtasks of one main task.
    pub fn subtask_digest(&self, main_id: &str, language: Language) -> Result<String, TaxonomyError> {
        let main = self.main_task(main_id)?;
        Ok(digest_lines(
            main.subtasks
                .iter()
                .map(|s| (s.id.as_str(), s.title(language), s.description(language))),
        ))
    }
}

fn digest_lines<'a>(rows: impl Iterator<Item = (&'a str, &'a str, &'a str)>) -> String {
    rows.map(|(id, title, description)| format!("{id} | {title} | {description}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Loads a taxonomy file and checks every fragment reference against
/// `corpus` in each of `languages`.
pub fn load_taxonomy(
    path: &Path,
    corpus: &impl FragmentLookup,
    languages: &[Language],
) -> Result<TaskTaxonomy, TaxonomyError> {
    let taxonomy = read_taxonomy(path)?;
    if let Some(first) = taxonomy.dangling_fragments(corpus, languages).into_iter().next() {
        return Err(first);
    }
    Ok(taxonomy)
}

/// Loads and structurally validates a taxonomy file without a corpus.
pub fn read_taxonomy(path: &Path) -> Result<TaskTaxonomy, TaxonomyError> {
    let text = std::fs::read_to_string(path).map_err(|e| TaxonomyError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    TaskTaxonomy::from_toml_str(&text)
}

/// Current taxonomy behind a lock; replacing it bumps the version so
/// readers holding the old `Arc` keep a consistent view.
#[derive(Debug)]
pub struct SharedTaxonomy {
    current: RwLock<Arc<TaskTaxonomy>>,
}

impl SharedTaxonomy {
    pub fn new(taxonomy: TaskTaxonomy) -> Self {
        Self {
            current: RwLock::new(Arc::new(taxonomy)),
        }
    }

    pub fn current(&self) -> Arc<TaskTaxonomy> {
        self.current.read().expect("taxonomy lock").clone()
    }

    /// Swaps in `next`, returning the version it was installed under.
    pub fn replace(&self, mut next: TaskTaxonomy) -> u64 {
        let mut guard = self.current.write().expect("taxonomy lock");
        next.version = next.version.max(guard.version + 1);
        let version = next.version;
        *guard = Arc::new(next);
        version
    }
}
