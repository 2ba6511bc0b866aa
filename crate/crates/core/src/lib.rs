//! Orchestration engine for an assistant embedded in a complex design tool.
//!
//! A user request flows through a two-level task taxonomy ([`taxonomy`],
//! [`router`]), the chosen subtask selects documentation fragments that are
//! stitched into one tailored document ([`corpus`]), questions are answered
//! against that document ([`qa`]), and command requests are matched to
//! registered plugins ([`plugins`], [`recommender`]) which run against a
//! versioned workspace ([`workspace`], [`executor`]). [`session`] and
//! [`engine`] tie the pieces into a conversation state machine.
//!
//! All language-model access goes through [`llm`], which ships a
//! deterministic scripted backend used by every test.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod corpus;
pub mod engine;
pub mod executor;
pub mod html;
pub mod llm;
pub mod plugins;
pub mod qa;
pub mod recommender;
pub mod router;
pub mod session;
pub mod taxonomy;
pub mod text;
pub mod workspace;

/// Interaction language. Both corpora are curated, never machine translated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::En, Language::Zh];

    pub fn as_str(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Zh => "zh",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown language {0:?} (expected en or zh)")]
pub struct UnknownLanguage(pub String);

impl FromStr for Language {
    type Err = UnknownLanguage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "en" => Ok(Language::En),
            "zh" => Ok(Language::Zh),
            other => Err(UnknownLanguage(other.to_string())),
        }
    }
}

/// Identifiers for tasks, fragments and plugins: `[a-z0-9-]{1,64}`.
pub fn is_valid_slug(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slug_rules() {
        assert!(is_valid_slug("diff-pairs"));
        assert!(is_valid_slug("3d-viewer"));
        assert!(!is_valid_slug(""));
        assert!(!is_valid_slug("Routing"));
        assert!(!is_valid_slug("a_b"));
        assert!(!is_valid_slug(&"a".repeat(65)));
        assert!(is_valid_slug(&"a".repeat(64)));
    }

    #[test]
    fn language_parse() {
        assert_eq!("zh".parse::<Language>().unwrap(), Language::Zh);
        assert!("fr".parse::<Language>().is_err());
    }
}
