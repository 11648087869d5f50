use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::porter;
use crate::text;

const STOPWORDS_EN_V1: &str = include_str!("../../data/stopwords_en_v1.txt");

/// Bumped whenever tokenization, stopwords or stemming change; persisted indexes check it.
pub const ANALYZER_VERSION: &str = "alnum-lower/stop-en-v1/porter-v1";

fn stopwords() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        STOPWORDS_EN_V1
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

pub fn is_stopword(token: &str) -> bool {
    stopwords().contains(token)
}

/// Which optional analysis steps run. Lowercasing and splitting always apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzerSettings {
    pub remove_stopwords: bool,
    pub stem: bool,
}

impl Default for AnalyzerSettings {
    fn default() -> Self {
        AnalyzerSettings {
            remove_stopwords: true,
            stem: true,
        }
    }
}

/// Lowercase, split on non-alphanumerics, drop stopwords, Porter-stem.
pub fn analyze(text: &str) -> Vec<String> {
    analyze_with(text, AnalyzerSettings::default())
}

pub fn analyze_with(text: &str, settings: AnalyzerSettings) -> Vec<String> {
    text::alnum_tokens(text)
        .into_iter()
        .filter(|t| !settings.remove_stopwords || !is_stopword(t))
        .map(|t| if settings.stem { porter::stem(&t) } else { t })
        .collect()
}
