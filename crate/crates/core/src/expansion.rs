//! Query expansion: prompt templates, the Query2doc concatenation and the HyDE
//! vector composition, plus bulk pseudo-document generation.

use serde::{Deserialize, Serialize};

use crate::config::{GenParams, Method, RunConfig};
use crate::error::{DataError, ProviderError};
use crate::model::{Claim, Dataset};
use crate::providers::{ChatRequest, EmbeddingVector, Provider};

pub const CLAIM_SLOT: &str = "{CLAIM}";

/// Error recorded when the model answered with blank text.
pub const EMPTY_GENERATION: &str = "empty generation";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    prompt_id: String,
    template: String,
}

impl PromptTemplate {
    pub fn new(prompt_id: &str, template: &str) -> Result<Self, DataError> {
        let slots = template.matches(CLAIM_SLOT).count();
        if slots != 1 {
            return Err(DataError::Invalid(format!(
                "template `{prompt_id}` must contain exactly one {CLAIM_SLOT} slot, found {slots}"
            )));
        }
        Ok(PromptTemplate {
            prompt_id: prompt_id.to_owned(),
            template: template.to_owned(),
        })
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    fn prefix_suffix(&self) -> (&str, &str) {
        self.template.split_once(CLAIM_SLOT).expect("validated at construction")
    }

    /// Built-in prompt for a method and dataset.
    pub fn builtin(method: Method, dataset: Dataset) -> Self {
        let (id, text) = match (method, dataset) {
            (Method::Query2doc, _) => ("query2doc", QUERY2DOC),
            (Method::Hyde, Dataset::Fever) => ("hyde-fever", HYDE_FEVER),
            (Method::Hyde, Dataset::Scifact) => ("hyde-scifact", HYDE_SCIFACT),
            (Method::Hyde, Dataset::Averitec) => ("hyde-averitec", HYDE_AVERITEC),
        };
        PromptTemplate::new(id, text).expect("built-in templates are valid")
    }
}

const HYDE_FEVER: &str = "Please write a wikipedia passage to verify the claim.\nClaim: {CLAIM}\nPassage:";
const HYDE_SCIFACT: &str = "Please write a scientific paper passage to support/refute the claim.\nClaim: {CLAIM}\nPassage:";
const HYDE_AVERITEC: &str = "Please write a fact-checking article to verify the claim.\nClaim: {CLAIM}\nPassage:";
const QUERY2DOC: &str = "Write a passage that answers the following query: {CLAIM}";

fn builtin_templates() -> impl Iterator<Item = PromptTemplate> {
    [
        (Method::Query2doc, Dataset::Fever),
        (Method::Hyde, Dataset::Fever),
        (Method::Hyde, Dataset::Scifact),
        (Method::Hyde, Dataset::Averitec),
    ]
    .into_iter()
    .map(|(m, d)| PromptTemplate::builtin(m, d))
}

pub fn render_prompt(template: &PromptTemplate, claim: &Claim) -> String {
    template.template.replacen(CLAIM_SLOT, &claim.text, 1)
}

/// Recover the claim text from a prompt rendered with a built-in template.
pub fn extract_claim_from_prompt(prompt: &str) -> Option<&str> {
    builtin_templates().find_map(|t| {
        let (pre, post) = t.prefix_suffix();
        let rest = prompt.strip_prefix(pre)?;
        let claim = rest.strip_suffix(post)?;
        // Borrow from `prompt`, not the temporary template.
        let start = pre.len();
        Some(&prompt[start..start + claim.len()])
    })
}

/// The claim repeated `n` times followed by the pseudo-document, space-joined.
pub fn expand_query2doc(claim_text: &str, pseudo_doc: &str, n: usize) -> Result<String, DataError> {
    if claim_text.is_empty() {
        return Err(DataError::Invalid("empty claim text".into()));
    }
    if n < 1 {
        return Err(DataError::Invalid("n must be >= 1".into()));
    }
    if pseudo_doc.is_empty() {
        return Err(DataError::Invalid("empty pseudo-document".into()));
    }
    let mut parts = vec![claim_text; n];
    parts.push(pseudo_doc);
    Ok(parts.join(" "))
}

/// v = 1/(N+1) · Σ_k (g(d_k) + g(q)), taken literally.
pub fn hyde_query_vector(q_vec: &EmbeddingVector, doc_vecs: &[EmbeddingVector]) -> Result<EmbeddingVector, ProviderError> {
    if doc_vecs.is_empty() {
        return Err(ProviderError::Precondition("at least one pseudo-document vector is required".into()));
    }
    let dim = q_vec.dim();
    let mut sum = vec![0.0; dim];
    for d in doc_vecs {
        if d.dim() != dim {
            return Err(ProviderError::DimMismatch {
                expected: dim,
                actual: d.dim(),
                context: Some("pseudo-document vector".into()),
            });
        }
        for ((s, x), q) in sum.iter_mut().zip(&d.values).zip(&q_vec.values) {
            *s += x + q;
        }
    }
    let scale = 1.0 / (doc_vecs.len() as f64 + 1.0);
    Ok(EmbeddingVector::new(sum.into_iter().map(|s| s * scale).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub claim_id: String,
    pub method: Method,
    pub model_id: String,
    pub repeat_index: u32,
    /// Position among the N pseudo-documents of one HyDE repeat.
    #[serde(default)]
    pub sample_index: u32,
    pub prompt_id: String,
    pub text: String,
    pub params: GenParams,
    #[serde(default)]
    pub generation_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Pseudo-documents generated per repeat.
pub fn samples_per_repeat(cfg: &RunConfig) -> usize {
    match cfg.method {
        Method::Query2doc => 1,
        Method::Hyde => cfg.hyde_docs,
    }
}

/// Generate every (claim, repeat, sample) pseudo-document. Failures come back
/// as flagged records with empty text; the output is sorted.
pub fn generate_all(claims: &[Claim], cfg: &RunConfig, provider: &Provider) -> Vec<GenerationRecord> {
    use rayon::prelude::*;

    let template = PromptTemplate::builtin(cfg.method, cfg.dataset);
    let samples = samples_per_repeat(cfg);
    if samples > 1 {
        log::warn!("N = {samples}: the query vector weights the claim N/(N+1)");
    }
    let jobs: Vec<(&Claim, u32, u32)> = claims
        .iter()
        .flat_map(|c| {
            (0..cfg.repeats as u32).flat_map(move |r| (0..samples as u32).map(move |s| (c, r, s)))
        })
        .collect();
    let mut records: Vec<GenerationRecord> = provider.pool().install(|| {
        jobs.par_iter()
            .map(|&(claim, repeat, sample)| {
                let req = ChatRequest::new(
                    &cfg.model_id,
                    render_prompt(&template, claim),
                    cfg.generation,
                    repeat * samples as u32 + sample,
                );
                let (text, error) = match provider.chat_complete(&req) {
                    Ok(t) if t.trim().is_empty() => (String::new(), Some(EMPTY_GENERATION.to_owned())),
                    Ok(t) => (t, None),
                    Err(e) => (String::new(), Some(e.to_string())),
                };
                GenerationRecord {
                    claim_id: claim.id.clone(),
                    method: cfg.method,
                    model_id: cfg.model_id.clone(),
                    repeat_index: repeat,
                    sample_index: sample,
                    prompt_id: template.prompt_id().to_owned(),
                    text,
                    params: cfg.generation,
                    generation_failed: error.is_some(),
                    error,
                }
            })
            .collect()
    });
    records.sort_by(|a, b| {
        (&a.claim_id, a.repeat_index, a.sample_index).cmp(&(&b.claim_id, b.repeat_index, b.sample_index))
    });
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Evidence;
    use crate::providers::{DiskCache, MockBackend};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn claim(id: &str, text: &str) -> Claim {
        Claim {
            id: id.into(),
            text: text.into(),
            label: None,
            evidence: vec![Evidence::CorpusRef { doc_id: "d".into() }],
        }
    }

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec())
    }

    #[test]
    fn query2doc_prompt_layout() {
        let t = PromptTemplate::builtin(Method::Query2doc, Dataset::Fever);
        assert_eq!(render_prompt(&t, &claim("c", "X")), "Write a passage that answers the following query: X");
    }

    #[test]
    fn hyde_prompts_per_dataset() {
        let c = claim("c", "Y");
        let fever = render_prompt(&PromptTemplate::builtin(Method::Hyde, Dataset::Fever), &c);
        assert_eq!(fever, "Please write a wikipedia passage to verify the claim.\nClaim: Y\nPassage:");
        let sci = render_prompt(&PromptTemplate::builtin(Method::Hyde, Dataset::Scifact), &c);
        assert!(sci.starts_with("Please write a scientific paper passage to support/refute the claim."));
        let av = render_prompt(&PromptTemplate::builtin(Method::Hyde, Dataset::Averitec), &c);
        assert!(av.starts_with("Please write a fact-checking article to verify the claim."));
    }

    #[test]
    fn claim_inserted_verbatim() {
        let t = PromptTemplate::builtin(Method::Query2doc, Dataset::Fever);
        let c = claim("c", "line one\nline {two}");
        let p = render_prompt(&t, &c);
        assert!(p.ends_with("line one\nline {two}"));
        assert_eq!(extract_claim_from_prompt(&p), Some("line one\nline {two}"));
    }

    #[test]
    fn template_slot_is_checked_at_construction() {
        assert!(PromptTemplate::new("x", "no slot").is_err());
        assert!(PromptTemplate::new("x", "{CLAIM} {CLAIM}").is_err());
        assert!(PromptTemplate::new("x", "ok {CLAIM}").is_ok());
    }

    #[test]
    fn extract_claim_roundtrips_every_builtin() {
        for t in builtin_templates() {
            let p = render_prompt(&t, &claim("c", "Some claim."));
            assert_eq!(extract_claim_from_prompt(&p), Some("Some claim."));
        }
        assert_eq!(extract_claim_from_prompt("unrelated"), None);
    }

    #[test]
    fn query2doc_concatenation() {
        assert_eq!(expand_query2doc("a b", "x y", 2).unwrap(), "a b a b x y");
        assert_eq!(expand_query2doc("q", "d", 1).unwrap(), "q d");
        assert!(expand_query2doc("", "d", 1).is_err());
        assert!(expand_query2doc("q", "", 1).is_err());
        assert!(expand_query2doc("q", "d", 0).is_err());
    }

    #[test]
    fn hyde_vector_examples() {
        assert_eq!(hyde_query_vector(&v(&[1.0, 0.0]), &[v(&[0.0, 1.0])]).unwrap().values, vec![0.5, 0.5]);
        assert_eq!(hyde_query_vector(&v(&[2.0, 2.0]), &[v(&[2.0, 2.0])]).unwrap().values, vec![2.0, 2.0]);
        let out = hyde_query_vector(&v(&[1.0, 0.0]), &[v(&[0.0, 1.0]), v(&[0.0, 3.0])]).unwrap();
        assert!((out.values[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out.values[1] - 4.0 / 3.0).abs() < 1e-12);
        assert!(hyde_query_vector(&v(&[1.0]), &[]).is_err());
        assert!(hyde_query_vector(&v(&[1.0]), &[v(&[1.0, 2.0])]).is_err());
    }

    fn cfg(repeats: usize) -> RunConfig {
        RunConfig {
            repeats,
            ..RunConfig::default()
        }
    }

    #[test]
    fn generate_all_cardinality_and_order() {
        let claims = vec![claim("b", "B."), claim("a", "A."), claim("c", "C.")];
        let p = Provider::new(Arc::new(MockBackend::new(1, 8)));
        let recs = generate_all(&claims, &cfg(2), &p);
        assert_eq!(recs.len(), 6);
        let keys: Vec<(&str, u32)> = recs.iter().map(|r| (r.claim_id.as_str(), r.repeat_index)).collect();
        assert_eq!(keys, vec![("a", 0), ("a", 1), ("b", 0), ("b", 1), ("c", 0), ("c", 1)]);
        assert!(recs.iter().all(|r| !r.generation_failed && !r.text.is_empty()));
    }

    #[test]
    fn warm_cache_rerun_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let claims = vec![claim("a", "A."), claim("b", "B.")];
        let first = {
            let p = Provider::new(Arc::new(MockBackend::new(1, 8))).with_cache(DiskCache::new(dir.path()));
            generate_all(&claims, &cfg(3), &p)
        };
        let mock = Arc::new(MockBackend::new(1, 8));
        let p = Provider::new(mock.clone()).with_cache(DiskCache::new(dir.path()));
        assert_eq!(generate_all(&claims, &cfg(3), &p), first);
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn failures_are_flagged_not_dropped() {
        let claims = vec![claim("a", "A.")];
        let p = Provider::new(Arc::new(MockBackend::new(1, 8).with_transient_failures(100))).with_retry(
            crate::providers::RetryPolicy {
                max_attempts: 1,
                base_delay: std::time::Duration::ZERO,
            },
        );
        let recs = generate_all(&claims, &cfg(2), &p);
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.generation_failed && r.text.is_empty() && r.error.is_some()));
    }

    proptest! {
        #[test]
        fn query2doc_splits_back_into_parts(
            claim_toks in prop::collection::vec("[a-z0-9]{1,6}", 1..5),
            doc_toks in prop::collection::vec("[a-z0-9]{1,6}", 1..8),
            n in 1usize..7,
        ) {
            let c = claim_toks.join(" ");
            let d = doc_toks.join(" ");
            let out = expand_query2doc(&c, &d, n).unwrap();
            let toks: Vec<&str> = out.split(' ').collect();
            let mut expected: Vec<&str> = Vec::new();
            for _ in 0..n {
                expected.extend(claim_toks.iter().map(String::as_str));
            }
            expected.extend(doc_toks.iter().map(String::as_str));
            prop_assert_eq!(toks, expected);
        }

        #[test]
        fn hyde_linearity(
            q in prop::collection::vec(-10.0f64..10.0, 1..16),
            alpha in -5.0f64..5.0,
        ) {
            let d: Vec<f64> = q.iter().map(|x| x * 0.5 - 1.0).collect();
            let base = hyde_query_vector(&v(&q), &[v(&d)]).unwrap();
            let qa: Vec<f64> = q.iter().map(|x| x * alpha).collect();
            let da: Vec<f64> = d.iter().map(|x| x * alpha).collect();
            let scaled = hyde_query_vector(&v(&qa), &[v(&da)]).unwrap();
            for (s, b) in scaled.values.iter().zip(&base.values) {
                prop_assert!((s - alpha * b).abs() <= 1e-12 * (1.0 + s.abs()));
            }
            for ((o, x), y) in base.values.iter().zip(&q).zip(&d) {
                prop_assert_eq!(*o, (x + y) * 0.5);
            }
        }
    }
}
