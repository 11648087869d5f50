//! Run configuration, read from a single JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::lexical::{AnalyzerSettings, Bm25Params};
use crate::matching::RougeVariant;
use crate::metrics::Scorer;
use crate::model::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Query2doc,
    Hyde,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Query2doc => "Query2doc",
            Method::Hyde => "HyDE",
        }
    }

    /// The no-expansion retriever each method is compared against.
    pub fn baseline_name(self) -> &'static str {
        match self {
            Method::Query2doc => "BM25",
            Method::Hyde => "Contriever",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "query2doc" => Ok(Method::Query2doc),
            "hyde" => Ok(Method::Hyde),
            other => Err(format!("unknown method `{other}` (expected query2doc or hyde)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl GenParams {
    pub const EXPANSION: GenParams = GenParams {
        temperature: 0.7,
        top_p: 1.0,
        max_tokens: 512,
    };

    pub const JUDGE: GenParams = GenParams {
        temperature: 0.0,
        top_p: 1.0,
        max_tokens: 16,
    };
}

/// Unit of observation for the M vs ¬M significance tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceUnit {
    /// Per-claim scores within each repeat.
    #[default]
    PerClaim,
    /// Per-repeat group means across repeats.
    PerRepeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NliBackend {
    /// Chat model prompted with the NLI template.
    #[default]
    Chat,
    /// Dedicated `/nli` endpoint on the sidecar.
    Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// Base URL of the OpenAI-compatible chat/embeddings API.
    pub api_base: Option<String>,
    /// Base URL of the local model sidecar (embeddings, `/nli`, `/score`).
    pub sidecar_base: Option<String>,
    pub nli_backend: NliBackend,
    /// Precomputed BERTScore matrix entries keyed by text hashes.
    pub score_fixture: Option<PathBuf>,
    pub mock: bool,
    /// Canned expansion texts for the mock provider.
    pub mock_generations: Option<PathBuf>,
    pub mock_embedding_dim: usize,
    pub cache_dir: Option<PathBuf>,
    pub max_attempts: u32,
    pub retry_base_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            api_base: None,
            sidecar_base: None,
            nli_backend: NliBackend::Chat,
            score_fixture: None,
            mock: false,
            mock_generations: None,
            mock_embedding_dim: 8,
            cache_dir: None,
            max_attempts: 3,
            retry_base_delay_ms: 500,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub method: Method,
    /// Model generating pseudo-documents.
    pub model_id: String,
    /// Model answering NLI and verdict prompts.
    pub judge_model_id: String,
    pub embedding_model_id: String,
    /// Generation repeats per claim.
    pub repeats: usize,
    /// Retrieval depth.
    pub k: usize,
    /// Copies of the claim placed before the pseudo-document.
    #[serde(alias = "n")]
    pub query_copies: usize,
    /// Pseudo-documents averaged into the dense query vector.
    #[serde(alias = "N")]
    pub hyde_docs: usize,
    pub generation: GenParams,
    pub judge: GenParams,
    pub rouge_threshold: f64,
    pub rouge_variant: RougeVariant,
    pub seed: u64,
    pub claims_path: PathBuf,
    pub corpus_path: PathBuf,
    pub bm25: Bm25Params,
    pub analyzer: AnalyzerSettings,
    /// Pairwise scorers for free-text evidence.
    pub scorers: Vec<Scorer>,
    /// Judge every (evidence, sentence) pair even after an entailment is found.
    pub exhaustive: bool,
    /// Requests in flight.
    pub parallelism: usize,
    pub embed_batch_size: usize,
    pub premise_max_chars: usize,
    pub evidence_max_chars: usize,
    /// Verdict fallback when the judge's answer cannot be parsed.
    pub fallback_label: Option<String>,
    pub significance_unit: SignificanceUnit,
    pub provider: ProviderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: Dataset::Fever,
            method: Method::Query2doc,
            model_id: "gpt-4o-mini".into(),
            judge_model_id: "gpt-4o-mini".into(),
            embedding_model_id: "facebook/contriever".into(),
            repeats: 8,
            k: 5,
            query_copies: 5,
            hyde_docs: 1,
            generation: GenParams::EXPANSION,
            judge: GenParams::JUDGE,
            rouge_threshold: 0.95,
            rouge_variant: RougeVariant::F,
            seed: 0,
            claims_path: PathBuf::from("claims.jsonl"),
            corpus_path: PathBuf::from("corpus.jsonl"),
            bm25: Bm25Params::default(),
            analyzer: AnalyzerSettings::default(),
            scorers: vec![Scorer::Meteor, Scorer::Bertscore],
            exhaustive: true,
            parallelism: 8,
            embed_batch_size: 32,
            premise_max_chars: 6000,
            evidence_max_chars: 2000,
            fallback_label: None,
            significance_unit: SignificanceUnit::PerClaim,
            provider: ProviderConfig::default(),
        }
    }
}

impl RunConfig {
    /// Read a config file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| DataError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.claims_path);
        fix(&mut self.corpus_path);
        if let Some(p) = self.provider.score_fixture.as_mut() {
            fix(p);
        }
        if let Some(p) = self.provider.mock_generations.as_mut() {
            fix(p);
        }
        if let Some(p) = self.provider.cache_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_owned()));
        if self.repeats < 1 {
            return bad("repeats must be >= 1");
        }
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        if self.query_copies < 1 {
            return bad("query_copies (n) must be >= 1");
        }
        if self.hyde_docs < 1 {
            return bad("hyde_docs (N) must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.rouge_threshold) {
            return bad("rouge_threshold must lie in [0, 1]");
        }
        for p in [&self.generation, &self.judge] {
            if !(p.temperature >= 0.0) || !(0.0..=1.0).contains(&p.top_p) || p.max_tokens < 1 {
                return bad("generation parameters out of range");
            }
        }
        self.bm25.validate().map_err(DataError::Config)?;
        if self.scorers.is_empty() {
            return bad("scorers must not be empty");
        }
        if self.parallelism < 1 || self.embed_batch_size < 1 {
            return bad("parallelism and embed_batch_size must be >= 1");
        }
        if self.provider.max_attempts < 1 {
            return bad("provider.max_attempts must be >= 1");
        }
        if let Some(l) = &self.fallback_label {
            if !self.dataset.label_set().contains(l) {
                return Err(DataError::Config(format!("fallback label `{l}` not in label set")));
            }
        }
        Ok(())
    }

    pub fn fallback_label(&self) -> String {
        self.fallback_label
            .clone()
            .unwrap_or_else(|| "not enough evidence".to_owned())
    }

    /// Stable digest of the settings that affect results, used to detect drift
    /// between stages. Cache location, parallelism and retry settings are excluded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut c = self.clone();
        c.parallelism = 0;
        c.embed_batch_size = 0;
        c.provider.cache_dir = None;
        c.provider.max_attempts = 0;
        c.provider.retry_base_delay_ms = 0;
        c.provider.timeout_secs = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_experimental_setup() {
        let c = RunConfig::default();
        assert_eq!(c.repeats, 8);
        assert_eq!(c.k, 5);
        assert_eq!(c.query_copies, 5);
        assert_eq!(c.hyde_docs, 1);
        assert_eq!(c.generation, GenParams { temperature: 0.7, top_p: 1.0, max_tokens: 512 });
        assert_eq!(c.rouge_threshold, 0.95);
        c.validate().unwrap();
    }

    #[test]
    fn loads_partial_json_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"method":"hyde","repeats":2,"N":1,"n":3,"claims_path":"c.jsonl"}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.method, Method::Hyde);
        assert_eq!(c.repeats, 2);
        assert_eq!(c.query_copies, 3);
        assert_eq!(c.claims_path, dir.path().join("c.jsonl"));
    }

    #[test]
    fn rejects_invalid_values() {
        let mut c = RunConfig::default();
        c.repeats = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.rouge_threshold = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.fallback_label = Some("nope".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"repeatz": 3}"#).is_err());
    }

    #[test]
    fn digest_tracks_changes() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.k = 10;
        assert_ne!(a.digest(), b.digest());
        let mut c = a.clone();
        c.parallelism = 2;
        c.provider.cache_dir = Some("elsewhere".into());
        assert_eq!(a.digest(), c.digest());
    }
}
