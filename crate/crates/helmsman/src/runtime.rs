//! Loading and cross-checking everything the engine needs at startup.

use std::sync::Arc;

use helmsman_core::corpus::FragmentStore;
use helmsman_core::engine::Engine;
use helmsman_core::executor::Executor;
use helmsman_core::llm::{self, LlmBackend};
use helmsman_core::plugins::{self, Registry};
use helmsman_core::qa::AugmentationStore;
use helmsman_core::taxonomy::{self, TaskTaxonomy};
use helmsman_core::workspace::WorkspaceState;
use helmsman_core::Language;

use crate::config::Config;

/// Everything loaded from the data directory.
#[derive(Debug)]
pub struct Loaded {
    pub taxonomy: TaskTaxonomy,
    pub fragments: FragmentStore,
    pub registry: Registry,
    pub workspace: WorkspaceState,
}

/// Outcome of a full validation pass. `errors` is empty iff the data is
/// consistent; warnings never fail validation.
#[derive(Debug, Default)]
pub struct Report {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub loaded: Option<Loaded>,
}

impl Report {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Loads taxonomy, both corpora, plugins and the workspace template and
/// cross-checks them. Keeps going after failures so the listing is complete.
pub fn validate(config: &Config) -> Report {
    let mut report = Report::default();
    let d = &config.data;

    let taxonomy = match taxonomy::read_taxonomy(&d.taxonomy) {
        Ok(t) => {
            for p in t.problems() {
                report.errors.push(format!("taxonomy: {p}"));
            }
            Some(t)
        }
        Err(e) => {
            report.errors.push(format!("taxonomy: {e}"));
            None
        }
    };

    let mut fragments = FragmentStore::new();
    let mut corpus_ok = true;
    for (language, dir) in [(Language::En, &d.docs_en), (Language::Zh, &d.docs_zh)] {
        match helmsman_core::corpus::ingest(dir, language) {
            Ok(list) => {
                for f in list {
                    if let Err(e) = fragments.insert(f) {
                        report.errors.push(format!("corpus {language}: {e}"));
                        corpus_ok = false;
                    }
                }
            }
            Err(e) => {
                report.errors.push(format!("corpus {language}: {e}"));
                corpus_ok = false;
            }
        }
    }
    if corpus_ok {
        for (id, missing) in fragments.parity_gaps() {
            report
                .warnings
                .push(format!("fragment {id:?} has no {missing} counterpart"));
        }
    }
    if let (Some(t), true) = (&taxonomy, corpus_ok) {
        for e in t.dangling_fragments(&fragments, &Language::ALL) {
            report.errors.push(format!("taxonomy: {e}"));
        }
    }

    let registry = match plugins::load_dir(&d.plugins) {
        Ok(r) => {
            if r.is_empty() {
                report.warnings.push(format!("no plugins found in {}", d.plugins.display()));
            }
            Some(r)
        }
        Err(e) => {
            report.errors.push(format!("plugins: {e}"));
            None
        }
    };

    let workspace = match WorkspaceState::load(&d.workspace) {
        Ok(w) => Some(w),
        Err(e) => {
            report.errors.push(format!("workspace: {e}"));
            None
        }
    };

    if let Err(e) = connect(config) {
        report.errors.push(format!("backend: {e}"));
    }

    if let (true, Some(taxonomy), Some(registry), Some(workspace)) =
        (report.errors.is_empty(), taxonomy, registry, workspace)
    {
        report.loaded = Some(Loaded {
            taxonomy,
            fragments,
            registry,
            workspace,
        });
    }
    report
}

pub fn connect(config: &Config) -> Result<Arc<dyn LlmBackend>, llm::GatewayError> {
    llm::connect(&config.backend_config())
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error("startup validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Backend(#[from] llm::GatewayError),
    #[error(transparent)]
    Qa(#[from] helmsman_core::qa::QaError),
}

/// Builds a ready engine whose augmentation store and execution log
/// persist under the configured state directory.
pub fn build_engine(config: &Config, backend: Arc<dyn LlmBackend>) -> Result<Engine, StartupError> {
    let report = validate(config);
    let Some(loaded) = report.loaded else {
        return Err(StartupError::Validation(report.errors));
    };
    let mut engine = Engine::new(
        backend,
        loaded.taxonomy,
        loaded.fragments,
        loaded.registry,
        loaded.workspace,
    );
    engine.settings = config.engine_settings();
    engine.augmentations = AugmentationStore::open(&config.data.state_dir.join("augmentations.jsonl"))?;
    engine.executor = Executor::new(config.executor_config());
    Ok(engine)
}
