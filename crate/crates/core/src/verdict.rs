//! Verdict prediction from a claim and its top-k retrieved evidence.

use serde::{Deserialize, Serialize};

use crate::config::GenParams;
use crate::error::{DataError, ProviderError};
use crate::model::LabelSet;
use crate::providers::{ChatRequest, Provider};
use crate::ranking::System;
use crate::text::truncate_chars;

const INSTRUCTION: &str = "Your task is to predict the verdict of a claim based on the provided evidence. Select one of the following labels: ";
const INSTRUCTION_TAIL: &str = ". Generate only the label without additional explanation or content.";

pub fn render_verdict_prompt(labels: &[String], claim: &str, evidence: &[String]) -> String {
    let mut p = format!("{INSTRUCTION}{}{INSTRUCTION_TAIL}\n\nClaim: {claim}\n\n", labels.join(", "));
    for (i, e) in evidence.iter().enumerate() {
        p.push_str(&format!("Evidence {}: {e}\n", i + 1));
    }
    p.push_str("\nLabel:");
    p
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictPromptParts<'a> {
    pub labels: Vec<String>,
    pub claim: &'a str,
    pub evidence: Vec<&'a str>,
}

/// Inverse of [`render_verdict_prompt`]; used by the mock judge.
pub fn split_verdict_prompt(prompt: &str) -> Option<VerdictPromptParts<'_>> {
    let rest = prompt.strip_prefix(INSTRUCTION)?;
    let (labels, rest) = rest.split_once(INSTRUCTION_TAIL)?;
    let rest = rest.strip_prefix("\n\nClaim: ")?;
    let body = rest.strip_suffix("\nLabel:")?;
    let ev_start = body.find("\n\nEvidence 1: ")?;
    let claim = &body[..ev_start];
    let mut evidence = Vec::new();
    let mut cursor = ev_start + 2;
    let mut i = 1;
    loop {
        let tag = format!("Evidence {i}: ");
        if !body[cursor..].starts_with(&tag) {
            break;
        }
        let start = cursor + tag.len();
        let next_tag = format!("\nEvidence {}: ", i + 1);
        let end = body[start..].find(&next_tag).map_or(body.len() - 1, |o| start + o);
        evidence.push(&body[start..end.max(start)]);
        cursor = end + 1;
        i += 1;
        if cursor >= body.len() {
            break;
        }
    }
    Some(VerdictPromptParts {
        labels: labels.split(", ").map(str::to_owned).collect(),
        claim,
        evidence,
    })
}

/// Exact case-insensitive match against canonical labels and aliases after
/// trimming whitespace and punctuation.
pub fn parse_verdict<'a>(response: &str, labels: &'a LabelSet) -> Option<&'a str> {
    let cleaned = response.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    labels.normalize(cleaned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub claim_id: String,
    pub system: System,
    pub repeat_index: u32,
    pub predicted: String,
    pub raw_response: String,
    pub parse_failed: bool,
    /// No evidence was retrieved, so the judge was not asked.
    #[serde(default)]
    pub no_evidence: bool,
    pub evidence_used: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct VerdictSettings {
    pub judge_model_id: String,
    pub params: GenParams,
    pub fallback_label: String,
    pub evidence_max_chars: usize,
    pub k: usize,
}

pub fn truncate_evidence(claim_id: &str, texts: &[String], max_chars: usize) -> Vec<String> {
    texts
        .iter()
        .map(|t| {
            let (kept, cut) = truncate_chars(t, max_chars);
            if cut {
                log::info!("claim {claim_id}: evidence block truncated to {max_chars} characters");
            }
            kept.to_owned()
        })
        .collect()
}

pub fn predict_verdict(
    claim_id: &str,
    claim_text: &str,
    evidence: &[String],
    labels: &LabelSet,
    provider: &Provider,
    settings: &VerdictSettings,
    system: System,
    repeat_index: u32,
) -> Result<VerdictRecord, ProviderError> {
    if evidence.len() > settings.k {
        return Err(ProviderError::Precondition(format!(
            "claim {claim_id}: {} evidence blocks exceed k = {}",
            evidence.len(),
            settings.k
        )));
    }
    if !labels.contains(&settings.fallback_label) {
        return Err(ProviderError::Precondition(format!(
            "fallback label `{}` is not in the label set",
            settings.fallback_label
        )));
    }
    let evidence_used = truncate_evidence(claim_id, evidence, settings.evidence_max_chars);
    let mut rec = VerdictRecord {
        claim_id: claim_id.to_owned(),
        system,
        repeat_index,
        predicted: settings.fallback_label.clone(),
        raw_response: String::new(),
        parse_failed: false,
        no_evidence: evidence_used.is_empty(),
        evidence_used,
    };
    if rec.no_evidence {
        return Ok(rec);
    }
    let prompt = render_verdict_prompt(labels.labels(), claim_text, &rec.evidence_used);
    for attempt in 0..2u32 {
        let req = ChatRequest::new(&settings.judge_model_id, prompt.clone(), settings.params, attempt);
        rec.raw_response = provider.chat_complete(&req)?;
        if let Some(label) = parse_verdict(&rec.raw_response, labels) {
            rec.predicted = label.to_owned();
            return Ok(rec);
        }
    }
    rec.parse_failed = true;
    Ok(rec)
}

/// One verdict job: the claim and the evidence its ranking surfaced.
pub struct VerdictJob<'a> {
    pub claim_id: &'a str,
    pub claim_text: &'a str,
    pub system: System,
    pub repeat_index: u32,
    pub evidence: Vec<String>,
}

/// Run every job with bounded parallelism. Completed records come back sorted
/// by (system, repeat, claim); the first provider error, if any, alongside.
pub fn verdict_run(
    jobs: Vec<VerdictJob<'_>>,
    labels: &LabelSet,
    provider: &Provider,
    settings: &VerdictSettings,
) -> Result<(Vec<VerdictRecord>, Option<ProviderError>), DataError> {
    use rayon::prelude::*;

    if !labels.contains(&settings.fallback_label) {
        return Err(DataError::Config(format!(
            "fallback label `{}` is not in the label set",
            settings.fallback_label
        )));
    }
    let results: Vec<Result<VerdictRecord, ProviderError>> = provider.pool().install(|| {
        jobs.par_iter()
            .map(|j| {
                predict_verdict(
                    j.claim_id,
                    j.claim_text,
                    &j.evidence,
                    labels,
                    provider,
                    settings,
                    j.system,
                    j.repeat_index,
                )
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut first_error = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    records.sort_by(|a, b| (a.system, a.repeat_index, &a.claim_id).cmp(&(b.system, b.repeat_index, &b.claim_id)));
    Ok((records, first_error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{Backend, DiskCache, MockBackend};
    use std::sync::{Arc, Mutex};

    struct Scripted(Mutex<Vec<String>>);

    impl Backend for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }
        fn chat(&self, _req: &ChatRequest) -> Result<String, ProviderError> {
            Ok(self.0.lock().unwrap().remove(0))
        }
        fn embed(&self, _m: &str, _t: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
            unreachable!()
        }
    }

    fn scripted(replies: &[&str]) -> Provider {
        Provider::new(Arc::new(Scripted(Mutex::new(replies.iter().map(|s| s.to_string()).collect()))))
    }

    fn settings() -> VerdictSettings {
        VerdictSettings {
            judge_model_id: "judge".into(),
            params: GenParams::JUDGE,
            fallback_label: "not enough evidence".into(),
            evidence_max_chars: 2000,
            k: 5,
        }
    }

    fn ev(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn run(provider: &Provider, labels: &LabelSet) -> VerdictRecord {
        predict_verdict("c1", "Claim.", &ev(&["E1"]), labels, provider, &settings(), System::Expanded, 0).unwrap()
    }

    #[test]
    fn prompt_snapshot() {
        let labels = LabelSet::fever();
        let p = render_verdict_prompt(labels.labels(), "The sky is blue.", &ev(&["Sky: The sky is blue.", "Rayleigh."]));
        assert_eq!(
            p,
            "Your task is to predict the verdict of a claim based on the provided evidence. \
             Select one of the following labels: supported, refuted, not enough evidence. \
             Generate only the label without additional explanation or content.\n\
             \n\
             Claim: The sky is blue.\n\
             \n\
             Evidence 1: Sky: The sky is blue.\n\
             Evidence 2: Rayleigh.\n\
             \n\
             Label:"
        );
        let parts = split_verdict_prompt(&p).unwrap();
        assert_eq!(parts.labels, labels.labels());
        assert_eq!(parts.claim, "The sky is blue.");
        assert_eq!(parts.evidence, vec!["Sky: The sky is blue.", "Rayleigh."]);
    }

    #[test]
    fn parses_labels_and_aliases() {
        let r = run(&scripted(&["supported"]), &LabelSet::fever());
        assert_eq!((r.predicted.as_str(), r.parse_failed), ("supported", false));
        let r = run(&scripted(&["CONTRADICT"]), &LabelSet::scifact());
        assert_eq!(r.predicted, "refuted");
        let r = run(&scripted(&["It is probably true.", "Refuted."]), &LabelSet::fever());
        assert_eq!((r.predicted.as_str(), r.parse_failed), ("refuted", false));
    }

    #[test]
    fn falls_back_after_one_reask() {
        let r = run(&scripted(&["It is probably true.", "It is probably true."]), &LabelSet::fever());
        assert!(r.parse_failed);
        assert_eq!(r.predicted, "not enough evidence");
        assert_eq!(r.raw_response, "It is probably true.");
    }

    #[test]
    fn evidence_is_truncated_and_bounded() {
        let p = scripted(&["supported"]);
        let mut s = settings();
        s.evidence_max_chars = 3;
        let r = predict_verdict("c", "C", &ev(&["abcdef"]), &LabelSet::fever(), &p, &s, System::Baseline, 0).unwrap();
        assert_eq!(r.evidence_used, vec!["abc"]);
        s.k = 1;
        assert!(predict_verdict("c", "C", &ev(&["a", "b"]), &LabelSet::fever(), &p, &s, System::Baseline, 0).is_err());
    }

    #[test]
    fn no_evidence_skips_the_judge() {
        let p = scripted(&[]);
        let r = predict_verdict("c", "C", &[], &LabelSet::fever(), &p, &settings(), System::Baseline, 0).unwrap();
        assert!(r.no_evidence);
        assert_eq!(r.predicted, "not enough evidence");
    }

    #[test]
    fn verdict_run_cardinality_and_warm_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelSet::fever();
        let jobs = || {
            let mut v = Vec::new();
            for r in 0..2 {
                for (id, text) in [("b", "B is true."), ("a", "A is true.")] {
                    v.push(VerdictJob {
                        claim_id: id,
                        claim_text: text,
                        system: System::Expanded,
                        repeat_index: r,
                        evidence: ev(&["Some evidence."]),
                    });
                }
            }
            v
        };
        let p = Provider::new(Arc::new(MockBackend::new(0, 8))).with_cache(DiskCache::new(dir.path()));
        let (first, err) = verdict_run(jobs(), &labels, &p, &settings()).unwrap();
        assert!(err.is_none());
        assert_eq!(first.len(), 4);
        assert_eq!(first[0].claim_id, "a");
        assert!(first.iter().all(|r| labels.contains(&r.predicted)));
        let mock = Arc::new(MockBackend::new(0, 8));
        let p = Provider::new(mock.clone()).with_cache(DiskCache::new(dir.path()));
        let (second, _) = verdict_run(jobs(), &labels, &p, &settings()).unwrap();
        assert_eq!(
            serde_json::to_string(&first).unwrap(),
            serde_json::to_string(&second).unwrap()
        );
        assert_eq!(mock.calls(), 0);
    }
}
