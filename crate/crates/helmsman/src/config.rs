//! Service configuration: one TOML file plus `HELMSMAN_*` environment
//! overrides. Precedence is env, then file, then built-in defaults.
//! Relative paths in the file resolve against the file's directory.

use std::path::{Path, PathBuf};
use std::time::Duration;

use helmsman_core::engine::EngineSettings;
use helmsman_core::executor::{ExecutorConfig, JailMode};
use helmsman_core::llm::{BackendConfig, BackendKind};
use helmsman_core::recommender::Method;
use serde::Deserialize;

pub const ENV_PREFIX: &str = "HELMSMAN_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub taxonomy: PathBuf,
    pub docs_en: PathBuf,
    pub docs_zh: PathBuf,
    pub plugins: PathBuf,
    pub workspace: PathBuf,
    /// Sessions, the augmentation store and the execution log live here.
    pub state_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            taxonomy: "data/taxonomy.toml".into(),
            docs_en: "data/docs/en".into(),
            docs_zh: "data/docs/zh".into(),
            plugins: "data/plugins".into(),
            workspace: "data/workspace/demo.ws".into(),
            state_dir: "state".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub api_key_ref: Option<String>,
    pub script_path: Option<PathBuf>,
    pub model: Option<String>,
    pub timeout_ms: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            api_key_ref: None,
            script_path: Some("data/scripts/happy.script".into()),
            model: None,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub request_timeout_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            request_timeout_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub max_rounds: u32,
    pub top_k: usize,
    pub recommend_method: Method,
    pub auto_augment: bool,
    pub max_notes: usize,
    pub consecutive_ungrounded: usize,
    pub topic_marker: String,
    pub window: usize,
    pub min_grounded_fraction: f64,
}

impl Default for EngineSection {
    fn default() -> Self {
        let s = EngineSettings::default();
        Self {
            max_rounds: s.max_rounds,
            top_k: s.top_k,
            recommend_method: s.recommend_method,
            auto_augment: s.auto_augment,
            max_notes: s.max_notes,
            consecutive_ungrounded: s.bottleneck.consecutive_ungrounded,
            topic_marker: s.bottleneck.topic_marker,
            window: s.bottleneck.window,
            min_grounded_fraction: s.bottleneck.min_grounded_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorSection {
    pub timeout_ms: u64,
    pub jail: JailMode,
}

impl Default for ExecutorSection {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            jail: JailMode::BestEffort,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub backend: BackendSection,
    pub server: ServerConfig,
    pub engine: EngineSection,
    pub executor: ExecutorSection,
}

impl Config {
    /// Reads `path` (if given), applies env overrides from `env`, resolves
    /// relative paths and validates the result.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let (mut config, base) = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                let config: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (config, base)
            }
            None => (Config::default(), PathBuf::new()),
        };
        config.resolve_paths(&base);
        config.apply_env(env)?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.taxonomy,
            &mut d.docs_en,
            &mut d.docs_zh,
            &mut d.plugins,
            &mut d.workspace,
            &mut d.state_dir,
        ] {
            join(p);
        }
        if let Some(p) = self.backend.script_path.as_mut() {
            join(p);
        }
    }

    fn apply_env(&mut self, env: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (name, value) in env {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let bad = |message: String| ConfigError::Env {
                name: name.clone(),
                message,
            };
            let num = |v: &str| v.parse::<u64>().map_err(|e| bad(e.to_string()));
            match key {
                "TAXONOMY" => self.data.taxonomy = value.into(),
                "DOCS_EN" => self.data.docs_en = value.into(),
                "DOCS_ZH" => self.data.docs_zh = value.into(),
                "PLUGINS" => self.data.plugins = value.into(),
                "WORKSPACE" => self.data.workspace = value.into(),
                "STATE_DIR" => self.data.state_dir = value.into(),
                "BACKEND_KIND" => {
                    self.backend.kind = match value.as_str() {
                        "scripted" => BackendKind::Scripted,
                        "http" => BackendKind::Http,
                        other => return Err(bad(format!("expected scripted or http, got {other:?}"))),
                    }
                }
                "BACKEND_ENDPOINT" => self.backend.endpoint = Some(value),
                "BACKEND_API_KEY_REF" => self.backend.api_key_ref = Some(value),
                "BACKEND_MODEL" => self.backend.model = Some(value),
                "SCRIPT_PATH" => self.backend.script_path = Some(value.into()),
                "BACKEND_TIMEOUT_MS" => self.backend.timeout_ms = num(&value)?,
                "BIND" => self.server.bind = value,
                "REQUEST_TIMEOUT_MS" => self.server.request_timeout_ms = num(&value)?,
                "MAX_ROUNDS" => self.engine.max_rounds = num(&value)? as u32,
                "TOP_K" => self.engine.top_k = num(&value)? as usize,
                "RECOMMEND_METHOD" => {
                    self.engine.recommend_method = match value.as_str() {
                        "llm" => Method::Llm,
                        "lexical" => Method::Lexical,
                        other => return Err(bad(format!("expected llm or lexical, got {other:?}"))),
                    }
                }
                "CONSECUTIVE_UNGROUNDED" => self.engine.consecutive_ungrounded = num(&value)? as usize,
                "MIN_GROUNDED_FRACTION" => {
                    self.engine.min_grounded_fraction =
                        value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                }
                "EXEC_TIMEOUT_MS" => self.executor.timeout_ms = num(&value)?,
                "JAIL" => {
                    self.executor.jail = match value.as_str() {
                        "required" => JailMode::Required,
                        "best_effort" => JailMode::BestEffort,
                        "off" => JailMode::Off,
                        other => return Err(bad(format!("expected required, best_effort or off, got {other:?}"))),
                    }
                }
                // unrelated HELMSMAN_ variables (RUST_LOG style knobs) are ignored
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backend_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.engine.max_rounds == 0 {
            return Err(ConfigError::Invalid("engine.max_rounds must be at least 1".into()));
        }
        if self.engine.top_k == 0 {
            return Err(ConfigError::Invalid("engine.top_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.engine.min_grounded_fraction) {
            return Err(ConfigError::Invalid("engine.min_grounded_fraction must be within 0..=1".into()));
        }
        if self.executor.timeout_ms == 0 || self.server.request_timeout_ms == 0 {
            return Err(ConfigError::Invalid("timeouts must be positive".into()));
        }
        Ok(())
    }

    pub fn backend_config(&self) -> BackendConfig {
        let b = &self.backend;
        BackendConfig {
            kind: b.kind,
            endpoint: b.endpoint.clone(),
            api_key_ref: b.api_key_ref.clone(),
            script_path: b.script_path.clone(),
            model: b.model.clone(),
            timeout_ms: b.timeout_ms,
        }
    }

    pub fn engine_settings(&self) -> EngineSettings {
        let e = &self.engine;
        let mut s = EngineSettings {
            max_rounds: e.max_rounds,
            recommend_method: e.recommend_method,
            top_k: e.top_k,
            auto_augment: e.auto_augment,
            max_notes: e.max_notes,
            ..EngineSettings::default()
        };
        s.bottleneck.consecutive_ungrounded = e.consecutive_ungrounded;
        s.bottleneck.topic_marker = e.topic_marker.clone();
        s.bottleneck.window = e.window;
        s.bottleneck.min_grounded_fraction = e.min_grounded_fraction;
        s
    }

    pub fn executor_config(&self) -> ExecutorConfig {
        ExecutorConfig {
            timeout: Duration::from_millis(self.executor.timeout_ms),
            jail: self.executor.jail,
            log_path: Some(self.data.state_dir.join("executions.jsonl")),
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.server.request_timeout_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn env_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("helmsman.toml");
        std::fs::write(&path, "[engine]\ntop_k = 5\nmax_rounds = 4\n[server]\nbind = \"0.0.0.0:1\"\n").unwrap();

        let c = Config::load(Some(&path), env(&[("HELMSMAN_TOP_K", "2"), ("OTHER", "x")])).unwrap();
        assert_eq!(c.engine.top_k, 2);
        assert_eq!(c.engine.max_rounds, 4);
        assert_eq!(c.server.bind, "0.0.0.0:1");
        assert_eq!(c.engine.window, 5);
        assert_eq!(c.data.plugins, dir.path().join("data/plugins"));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            Config::load(None, env(&[("HELMSMAN_JAIL", "sometimes")])),
            Err(ConfigError::Env { .. })
        ));
        assert!(matches!(
            Config::load(None, env(&[("HELMSMAN_BACKEND_KIND", "http")])),
            Err(ConfigError::Invalid(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[engine]\nbogus = 1\n").unwrap();
        assert!(matches!(Config::load(Some(&path), env(&[])), Err(ConfigError::Parse { .. })));
    }
}
