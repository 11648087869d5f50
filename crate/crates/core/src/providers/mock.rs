//! Offline stand-in for every endpoint.
//!
//! Every answer is a pure function of the seed and the request:
//! - expansion prompts return canned text for known claims, seeded filler otherwise;
//! - NLI prompts are judged by stemmed-token containment of hypothesis in premise;
//! - verdict prompts answer the first listed label when some evidence block covers
//!   most of the claim's content words, and a hash-chosen label otherwise;
//! - embeddings are signed feature-hashed bags of stems, L2-normalized;
//! - pair scores are cosine similarities of those embeddings, clamped to [0, 1].

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::nli::{split_nli_prompt, NliLabel};
use super::{Backend, ChatRequest, Health};
use crate::error::{DataError, ProviderError};
use crate::expansion::extract_claim_from_prompt;
use crate::lexical::analyze;
use crate::model::read_jsonl;
use crate::text::alnum_tokens;
use crate::verdict::split_verdict_prompt;

const FILLER: &[&str] = &[
    "historians", "describe", "archival", "records", "suggest", "various", "accounts",
    "remain", "widely", "debated", "several", "sources", "note", "broader", "context",
    "early", "observers", "later", "commentators", "emphasize", "regional", "details",
    "contemporary", "analysis", "offers", "perspective", "scholars", "continue", "examine",
    "documents", "public", "interest", "persists", "evidence", "summaries", "vary",
];

const SCORE_DIM: usize = 64;

#[derive(Debug, Deserialize)]
struct CannedEntry {
    claim: String,
    texts: Vec<String>,
}

pub struct MockBackend {
    seed: u64,
    embedding_dim: usize,
    canned: HashMap<String, Vec<String>>,
    calls: AtomicUsize,
    failures_left: AtomicUsize,
}

impl MockBackend {
    pub fn new(seed: u64, embedding_dim: usize) -> Self {
        MockBackend {
            seed,
            embedding_dim: embedding_dim.max(1),
            canned: HashMap::new(),
            calls: AtomicUsize::new(0),
            failures_left: AtomicUsize::new(0),
        }
    }

    /// Canned expansions: JSON lines `{"claim": ..., "texts": [...]}`, indexed by repeat.
    pub fn with_canned_file(mut self, path: &Path) -> Result<Self, DataError> {
        let entries: Vec<CannedEntry> = read_jsonl(path)?;
        for e in entries {
            if e.texts.is_empty() {
                return Err(DataError::Invalid(format!("canned entry for `{}` has no texts", e.claim)));
            }
            self.canned.insert(e.claim, e.texts);
        }
        Ok(self)
    }

    pub fn with_canned(mut self, claim: &str, texts: Vec<String>) -> Self {
        self.canned.insert(claim.to_owned(), texts);
        self
    }

    /// Fail the next `n` calls with a transient transport error.
    pub fn with_transient_failures(self, n: usize) -> Self {
        self.failures_left.store(n, Ordering::SeqCst);
        self
    }

    /// Endpoint calls served so far, failures included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn tick(&self, endpoint: &str) -> Result<(), ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let injected = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if injected {
            return Err(ProviderError::Transport {
                endpoint: format!("mock:{endpoint}"),
                message: "injected failure".into(),
            });
        }
        Ok(())
    }

    fn rng_for(&self, parts: &[&[u8]]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn filler_text(&self, req: &ChatRequest) -> String {
        let params = format!("{}|{}|{}|{}", req.temperature, req.top_p, req.max_tokens, req.repeat_index);
        let mut rng = self.rng_for(&[req.model_id.as_bytes(), req.prompt.as_bytes(), params.as_bytes()]);
        let sentences = rng.gen_range(2..=4);
        (0..sentences)
            .map(|_| {
                let n = rng.gen_range(5..=9);
                let words: Vec<&str> = (0..n).map(|_| *FILLER.choose(&mut rng).expect("nonempty")).collect();
                let mut s = words.join(" ");
                s[..1].make_ascii_uppercase();
                s.push('.');
                s
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn verdict(&self, labels: &[String], claim: &str, evidence: &[&str]) -> String {
        let claim_terms: BTreeSet<String> = analyze(claim).into_iter().collect();
        let coverage = evidence
            .iter()
            .map(|e| {
                let ev: BTreeSet<String> = analyze(e).into_iter().collect();
                claim_terms.intersection(&ev).count() as f64 / claim_terms.len().max(1) as f64
            })
            .fold(0.0, f64::max);
        if coverage >= 0.6 {
            return labels[0].clone();
        }
        let mut rng = self.rng_for(&[b"verdict", claim.as_bytes()]);
        labels.choose(&mut rng).expect("nonempty").clone()
    }

    fn embed_one(&self, text: &str, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for tok in analyze(text) {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(tok.as_bytes());
            let d = h.finalize();
            let bucket = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as usize % dim;
            v[bucket] += if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        if v.iter().all(|&x| x == 0.0) {
            let mut rng = self.rng_for(&[b"embed", text.as_bytes()]);
            v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Hypothesis content stems all present in the premise → entailment; the same
/// with a negation on one side only → contradiction; otherwise neutral.
pub fn lexical_entailment(premise: &str, hypothesis: &str) -> NliLabel {
    let hyp: BTreeSet<String> = analyze(hypothesis).into_iter().collect();
    let prem: BTreeSet<String> = analyze(premise).into_iter().collect();
    if hyp.is_empty() || !hyp.is_subset(&prem) {
        return NliLabel::Neutral;
    }
    let negated = |s: &str| alnum_tokens(s).iter().any(|t| matches!(t.as_str(), "not" | "no" | "never"));
    if negated(premise) != negated(hypothesis) {
        NliLabel::Contradiction
    } else {
        NliLabel::Entailment
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.tick("chat")?;
        if let Some((premise, hypothesis)) = split_nli_prompt(&req.prompt) {
            return Ok(lexical_entailment(premise, hypothesis).as_str().to_owned());
        }
        if let Some(v) = split_verdict_prompt(&req.prompt) {
            if !v.labels.is_empty() {
                return Ok(self.verdict(&v.labels, v.claim, &v.evidence));
            }
        }
        if let Some(claim) = extract_claim_from_prompt(&req.prompt) {
            if let Some(texts) = self.canned.get(claim) {
                return Ok(texts[req.repeat_index as usize % texts.len()].clone());
            }
        }
        Ok(self.filler_text(req))
    }

    fn embed(&self, _model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        self.tick("embeddings")?;
        Ok(texts.iter().map(|t| self.embed_one(t, self.embedding_dim)).collect())
    }

    fn nli(&self, premise: &str, hypothesis: &str) -> Result<String, ProviderError> {
        self.tick("nli")?;
        Ok(lexical_entailment(premise, hypothesis).as_str().to_owned())
    }

    fn score(&self, _scorer: &str, candidates: &[String], references: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        self.tick("score")?;
        let refs: Vec<Vec<f64>> = references.iter().map(|r| self.embed_one(r, SCORE_DIM)).collect();
        Ok(candidates
            .iter()
            .map(|c| {
                let cv = self.embed_one(c, SCORE_DIM);
                refs.iter()
                    .map(|rv| {
                        let dot: f64 = cv.iter().zip(rv).map(|(a, b)| a * b).sum();
                        dot.clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect())
    }

    fn health(&self) -> Result<Option<Health>, ProviderError> {
        Ok(Some(Health {
            embedding_dim: Some(self.embedding_dim),
            embedding_model: Some("mock".into()),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str, repeat: u32) -> ChatRequest {
        ChatRequest {
            model_id: "m".into(),
            prompt: prompt.into(),
            temperature: 0.7,
            top_p: 1.0,
            max_tokens: 512,
            repeat_index: repeat,
        }
    }

    #[test]
    fn filler_is_deterministic_per_seed_and_repeat() {
        let a = MockBackend::new(7, 8);
        let b = MockBackend::new(7, 8);
        assert_eq!(a.chat(&req("hello", 0)).unwrap(), b.chat(&req("hello", 0)).unwrap());
        assert_ne!(a.chat(&req("hello", 0)).unwrap(), a.chat(&req("hello", 1)).unwrap());
        assert_ne!(a.chat(&req("hello", 0)).unwrap(), MockBackend::new(8, 8).chat(&req("hello", 0)).unwrap());
    }

    #[test]
    fn lexical_entailment_rule() {
        let premise = "Paris is the capital of France and its largest city.";
        assert_eq!(lexical_entailment(premise, "Paris is the capital of France."), NliLabel::Entailment);
        assert_eq!(lexical_entailment(premise, "Paris is not the capital of France."), NliLabel::Contradiction);
        assert_eq!(lexical_entailment(premise, "Paris hosts many museums."), NliLabel::Neutral);
        assert_eq!(lexical_entailment(premise, "It is."), NliLabel::Neutral);
    }

    #[test]
    fn embeddings_are_unit_length_and_stable() {
        let m = MockBackend::new(1, 8);
        let v = m.embed("m", &["a cat".into(), "a cat".into(), "!!!".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        for x in &v {
            assert_eq!(x.len(), 8);
            assert!((x.iter().map(|y| y * y).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn injected_failures_are_transient_and_counted() {
        let m = MockBackend::new(0, 8).with_transient_failures(2);
        assert!(m.chat(&req("x", 0)).unwrap_err().is_transient());
        assert!(m.chat(&req("x", 0)).is_err());
        assert!(m.chat(&req("x", 0)).is_ok());
        assert_eq!(m.calls(), 3);
    }
}
