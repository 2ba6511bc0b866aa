#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use helmsman::config::Config;
use helmsman::runtime::{self, Loaded};
use helmsman_core::engine::Engine;
use helmsman_core::llm::{CompletionRequest, GatewayError, LlmBackend};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn shipped_config() -> Config {
    Config::load(Some(&repo_root().join("helmsman.toml")), Vec::new()).expect("shipped config loads")
}

pub fn shipped() -> Loaded {
    let report = runtime::validate(&shipped_config());
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    report.loaded.expect("shipped data loads")
}

/// Engine over the shipped data with in-memory stores.
pub fn engine_with(backend: Arc<dyn LlmBackend>) -> Engine {
    let l = shipped();
    Engine::new(backend, l.taxonomy, l.fragments, l.registry, l.workspace)
}

/// Backend answering from a closure; handy for fuzzed replies.
pub struct FnBackend<F>(pub Mutex<F>);

impl<F> FnBackend<F> {
    pub fn new(f: F) -> Self {
        Self(Mutex::new(f))
    }
}

impl<F> LlmBackend for FnBackend<F>
where
    F: FnMut(&CompletionRequest) -> String + Send,
{
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut f = self.0.lock().unwrap();
        Ok(f(request))
    }
}
