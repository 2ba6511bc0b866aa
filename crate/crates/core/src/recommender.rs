//! Matches a stated need against plugin descriptions.

use serde::{Deserialize, Serialize};

use crate::llm::{ChatMessage, CompletionRequest, GatewayError, LlmBackend, Purpose};
use crate::plugins::Registry;
use crate::router::{lexical_rank, repair_id_list};
use crate::Language;

pub const DEFAULT_TOP_K: usize = 3;

const INSTRUCTIONS: &str = "You recommend plugins for a PCB design tool. \
Pick the plugins whose descriptions best match the user's need. \
Reply with plugin ids only, comma-separated, best first.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Llm,
    Lexical,
    /// Set when the user overrides the ranking with an unranked plugin.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub ranked: Vec<(String, f64)>,
    pub chosen: Option<String>,
    pub method: Method,
    /// True when the llm path returned nothing usable and lexical ranking
    /// was used instead.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum RecommendError {
    #[error("need is empty")]
    EmptyNeed,
    #[error("no plugins are registered")]
    EmptyRegistry,
    #[error("plugin {0:?} was not recommended")]
    NotRecommended(String),
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("a plugin was already chosen")]
    AlreadyChosen,
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

/// The text a plugin is matched on: description then display name.
pub fn match_text(registry: &Registry, id: &str, language: Language) -> String {
    let m = &registry.manifests[id];
    format!("{} {}", m.description_in(language), m.display_name_in(language))
}

/// Full lexical ranking over every registered plugin.
pub fn lexical_ranking(need: &str, registry: &Registry, language: Language) -> Vec<(String, f64)> {
    let texts: Vec<(String, String)> = registry
        .manifests
        .keys()
        .map(|id| (id.clone(), match_text(registry, id, language)))
        .collect();
    lexical_rank(need, texts.iter().map(|(id, t)| (id.as_str(), t.as_str())))
}

pub fn recommend(
    need: &str,
    registry: &Registry,
    backend: &dyn LlmBackend,
    method: Method,
    language: Language,
    top_k: usize,
) -> Result<Recommendation, RecommendError> {
    if need.trim().is_empty() {
        return Err(RecommendError::EmptyNeed);
    }
    if registry.is_empty() {
        return Err(RecommendError::EmptyRegistry);
    }
    let k = top_k.max(1);
    if method == Method::Llm {
        let listing: String = registry
            .list_plugins(language)
            .iter()
            .map(|r| format!("{} | {} | {}\n", r.plugin_id, r.display_name, r.description))
            .collect();
        let request = CompletionRequest::new(
            Purpose::Recommend,
            vec![
                ChatMessage::system(format!("{INSTRUCTIONS}\n\nPlugins:\n{listing}")),
                ChatMessage::user(need),
            ],
        );
        let reply = backend.complete(&request)?;
        let ids = repair_id_list(&reply, |id| registry.get(id).is_some(), k);
        if !ids.is_empty() {
            let ranked = ids
                .into_iter()
                .enumerate()
                .map(|(i, id)| (id, (1.0 - 0.1 * i as f64).max(0.0)))
                .collect();
            return Ok(Recommendation {
                ranked,
                chosen: None,
                method: Method::Llm,
                fallback: false,
            });
        }
    }
    let mut ranked = lexical_ranking(need, registry, language);
    ranked.truncate(k);
    Ok(Recommendation {
        ranked,
        chosen: None,
        method: Method::Lexical,
        fallback: method == Method::Llm,
    })
}

impl Recommendation {
    pub fn top(&self) -> Option<&str> {
        self.ranked.first().map(|(id, _)| id.as_str())
    }

    pub fn is_ranked(&self, id: &str) -> bool {
        self.ranked.iter().any(|(r, _)| r == id)
    }

    /// Records the user's choice. With `override_ranking` any registered
    /// plugin may be chosen and the method becomes manual.
    pub fn confirm(
        &self,
        plugin_id: &str,
        override_ranking: bool,
        registry: &Registry,
    ) -> Result<Recommendation, RecommendError> {
        if self.chosen.is_some() {
            return Err(RecommendError::AlreadyChosen);
        }
        let mut out = self.clone();
        if !self.is_ranked(plugin_id) {
            if !override_ranking {
                return Err(RecommendError::NotRecommended(plugin_id.to_string()));
            }
            if registry.get(plugin_id).is_none() {
                return Err(RecommendError::UnknownPlugin(plugin_id.to_string()));
            }
            out.method = Method::Manual;
        }
        out.chosen = Some(plugin_id.to_string());
        Ok(out)
    }
}
