//! Leakage matching: segment a pseudo-document, drop sentences that merely
//! reproduce the claim, judge every (gold evidence, sentence) pair and flag the
//! claim as matched when any pair is an entailment.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::analysis::mean_se;
use crate::error::{DataError, ProviderError};
use crate::model::{Claim, Corpus, Evidence};
use crate::providers::{NliLabel, NliOutcome, Provider};
use crate::text::{alnum_tokens, truncate_chars};

const ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "prof.", "sr.", "jr.", "st.", "mt.", "gen.", "col.", "lt.", "sgt.",
    "rev.", "hon.", "u.s.", "u.k.", "u.n.", "e.g.", "i.e.", "etc.", "vs.", "fig.", "figs.", "no.",
    "nos.", "vol.", "pp.", "p.", "inc.", "ltd.", "co.", "corp.", "dept.", "est.", "approx.", "al.",
    "jan.", "feb.", "mar.", "apr.", "jun.", "jul.", "aug.", "sep.", "sept.", "oct.", "nov.", "dec.",
];

fn is_abbreviation(word: &str) -> bool {
    let w = word.trim_start_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    if ABBREVIATIONS.contains(&w.as_str()) {
        return true;
    }
    // Single-letter initials such as "J." in "J. Smith".
    let mut chars = w.chars();
    matches!((chars.next(), chars.next(), chars.next()), (Some(c), Some('.'), None) if c.is_alphabetic())
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '\u{201c}' | '\u{2018}')
}

fn split_paragraph(par: &str, out: &mut Vec<String>) {
    let chars: Vec<(usize, char)> = par.char_indices().collect();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if !matches!(c, '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && (matches!(chars[j].1, '.' | '!' | '?') || is_closer(chars[j].1)) {
            j += 1;
        }
        let mut k = j;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        if k == j || k >= chars.len() {
            i = j;
            continue;
        }
        let mut next = chars[k].1;
        if is_opener(next) && k + 1 < chars.len() {
            next = chars[k + 1].1;
        }
        let starts_sentence = next.is_uppercase() || next.is_ascii_digit();
        let word_start = par[..pos].rfind(char::is_whitespace).map_or(0, |w| w + 1);
        let word = &par[word_start..pos + c.len_utf8()];
        if starts_sentence && !(c == '.' && is_abbreviation(word)) {
            let end = if j < chars.len() { chars[j].0 } else { par.len() };
            out.push(par[start..end].trim().to_owned());
            start = chars[k].0;
        }
        i = k;
    }
    out.push(par[start..].trim().to_owned());
}

/// Split on terminal punctuation followed by a capitalized or numeric start,
/// and on blank lines. Known abbreviations and initials do not end sentences.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut par = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !par.is_empty() {
                split_paragraph(&par, &mut out);
                par.clear();
            }
        } else {
            if !par.is_empty() {
                par.push('\n');
            }
            par.push_str(line);
        }
    }
    if !par.is_empty() {
        split_paragraph(&par, &mut out);
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Which ROUGE-2 component the reproduction filter compares against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RougeVariant {
    #[default]
    F,
    P,
    R,
}

fn bigrams(tokens: &[String]) -> HashMap<(&str, &str), usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(2) {
        *m.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += 1;
    }
    m
}

/// ROUGE-2 precision, recall and F over lowercase alphanumeric tokens.
pub fn rouge2(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let c = alnum_tokens(candidate);
    let r = alnum_tokens(reference);
    if c.len() < 2 || r.len() < 2 {
        return if c == r { (1.0, 1.0, 1.0) } else { (0.0, 0.0, 0.0) };
    }
    let cb = bigrams(&c);
    let rb = bigrams(&r);
    let overlap: usize = cb.iter().map(|(k, &n)| n.min(*rb.get(k).unwrap_or(&0))).sum();
    let p = overlap as f64 / (c.len() - 1) as f64;
    let rec = overlap as f64 / (r.len() - 1) as f64;
    let f = if p + rec == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) };
    (p, rec, f)
}

pub fn rouge2_f(candidate: &str, reference: &str) -> f64 {
    rouge2(candidate, reference).2
}

pub fn rouge2_variant(candidate: &str, reference: &str, variant: RougeVariant) -> f64 {
    let (p, r, f) = rouge2(candidate, reference);
    match variant {
        RougeVariant::F => f,
        RougeVariant::P => p,
        RougeVariant::R => r,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceSet {
    pub claim_id: String,
    pub repeat_index: u32,
    pub sentences: Vec<String>,
    pub removed_count: usize,
}

pub fn filter_reproductions(sentences: Vec<String>, claim_text: &str, threshold: f64, variant: RougeVariant) -> (Vec<String>, usize) {
    let before = sentences.len();
    let kept: Vec<String> = sentences
        .into_iter()
        .filter(|s| rouge2_variant(s, claim_text, variant) < threshold)
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Segment and filter the pseudo-documents of one (claim, repeat).
pub fn build_sentence_set(
    claim: &Claim,
    repeat_index: u32,
    texts: &[&str],
    threshold: f64,
    variant: RougeVariant,
) -> SentenceSet {
    let all: Vec<String> = texts.iter().flat_map(|t| segment_sentences(t)).collect();
    let (sentences, removed_count) = filter_reproductions(all, &claim.text, threshold, variant);
    SentenceSet {
        claim_id: claim.id.clone(),
        repeat_index,
        sentences,
        removed_count,
    }
}

/// Premises for NLI: a referenced document's text, or the free-text evidence itself.
pub fn resolve_evidence_texts(claim: &Claim, corpus: &Corpus, max_chars: usize) -> Result<Vec<String>, DataError> {
    claim
        .evidence
        .iter()
        .map(|e| {
            let text = match e {
                Evidence::CorpusRef { doc_id } => corpus
                    .get(doc_id)
                    .map(|d| d.text.as_str())
                    .ok_or_else(|| DataError::Invalid(format!("claim {}: unknown document {doc_id}", claim.id)))?,
                Evidence::FreeText { text } => text.as_str(),
            };
            let (kept, cut) = truncate_chars(text, max_chars);
            if cut {
                log::info!("claim {}: premise truncated to {max_chars} characters", claim.id);
            }
            Ok(kept.to_owned())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliJudgment {
    pub evidence_index: usize,
    pub sentence_index: usize,
    pub label: NliLabel,
    pub parse_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub claim_id: String,
    pub repeat_index: u32,
    pub matched: bool,
    pub judgments: Vec<NliJudgment>,
    pub empty_sentence_set: bool,
    pub sentence_count: usize,
    pub removed_count: usize,
    /// Set when the judge failed part way; judgments hold what completed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MatchRecord {
    pub fn parse_failures(&self) -> usize {
        self.judgments.iter().filter(|j| j.parse_failed).count()
    }
}

pub trait Judge: Sync {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliOutcome, ProviderError>;
}

impl Judge for Provider {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliOutcome, ProviderError> {
        self.nli_judge(premise, hypothesis)
    }
}

pub fn any_entailment(judgments: &[NliJudgment]) -> bool {
    judgments.iter().any(|j| j.label == NliLabel::Entailment)
}

/// Judge every (evidence i, sentence j) pair in lexicographic order. With
/// `exhaustive` off, judging stops at the first entailment.
pub fn match_document(evidence: &[String], set: &SentenceSet, judge: &dyn Judge, exhaustive: bool) -> Result<MatchRecord, DataError> {
    if evidence.is_empty() {
        return Err(DataError::Invalid(format!("claim {}: no evidence to match against", set.claim_id)));
    }
    let mut rec = MatchRecord {
        claim_id: set.claim_id.clone(),
        repeat_index: set.repeat_index,
        matched: false,
        judgments: Vec::new(),
        empty_sentence_set: set.sentences.is_empty(),
        sentence_count: set.sentences.len(),
        removed_count: set.removed_count,
        error: None,
    };
    'outer: for (i, premise) in evidence.iter().enumerate() {
        for (j, hypothesis) in set.sentences.iter().enumerate() {
            match judge.judge(premise, hypothesis) {
                Ok(out) => {
                    rec.judgments.push(NliJudgment {
                        evidence_index: i,
                        sentence_index: j,
                        label: out.label,
                        parse_failed: out.parse_failed,
                    });
                    if out.label == NliLabel::Entailment && !exhaustive {
                        break 'outer;
                    }
                }
                Err(e) => {
                    rec.error = Some(e.to_string());
                    break 'outer;
                }
            }
        }
    }
    rec.matched = any_entailment(&rec.judgments);
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRate {
    pub repeat_index: u32,
    pub matched: usize,
    pub claims: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedRate {
    pub per_repeat: Vec<RepeatRate>,
    pub mean: f64,
    pub standard_error: f64,
}

pub fn matched_rate(records: &[MatchRecord]) -> Result<MatchedRate, DataError> {
    let mut by_repeat: std::collections::BTreeMap<u32, (usize, usize)> = Default::default();
    for r in records {
        let e = by_repeat.entry(r.repeat_index).or_default();
        e.1 += 1;
        if r.matched {
            e.0 += 1;
        }
    }
    let per_repeat: Vec<RepeatRate> = by_repeat
        .into_iter()
        .map(|(repeat_index, (matched, claims))| RepeatRate {
            repeat_index,
            matched,
            claims,
            rate: matched as f64 / claims as f64,
        })
        .collect();
    let rates: Vec<f64> = per_repeat.iter().map(|r| r.rate).collect();
    let (mean, standard_error) = mean_se(&rates)?;
    Ok(MatchedRate {
        per_repeat,
        mean,
        standard_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Mutex;

    #[test]
    fn segmentation_examples() {
        assert_eq!(segment_sentences("Paris is nice. It rains."), vec!["Paris is nice.", "It rains."]);
        assert_eq!(segment_sentences("Dr. Smith arrived."), vec!["Dr. Smith arrived."]);
        assert_eq!(segment_sentences("Line one\n\nLine two"), vec!["Line one", "Line two"]);
    }

    #[test]
    fn segmentation_details() {
        assert_eq!(
            segment_sentences("He moved to the U.S. In 1990 he left. Why? Because!"),
            vec!["He moved to the U.S. In 1990 he left.", "Why?", "Because!"]
        );
        assert_eq!(segment_sentences("It was 3.5 m long. \"Yes.\" She said."), vec!["It was 3.5 m long.", "\"Yes.\"", "She said."]);
        assert_eq!(segment_sentences("lower. case stays"), vec!["lower. case stays"]);
        assert_eq!(segment_sentences("J. Smith wrote it. 1999 was later."), vec!["J. Smith wrote it.", "1999 was later."]);
        assert!(segment_sentences("  \n\n ").is_empty());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge2_f("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge2_f("the cat sat", "dogs run far"), 0.0);
        assert_eq!(rouge2("the cat sat", "the cat ran"), (0.5, 0.5, 0.5));
        assert_eq!(rouge2_f("Yes", "yes!"), 1.0);
        assert_eq!(rouge2_f("Yes", "no"), 0.0);
    }

    #[test]
    fn filter_examples() {
        let claim = "The Eiffel Tower is located in Paris.";
        let (kept, removed) = filter_reproductions(
            vec![claim.to_owned(), "Bananas are yellow.".to_owned()],
            claim,
            0.95,
            RougeVariant::F,
        );
        assert_eq!(kept, vec!["Bananas are yellow."]);
        assert_eq!(removed, 1);
    }

    #[test]
    fn one_changed_word_near_the_threshold() {
        // Last word changed in a 22-token claim: 20 of 21 bigrams shared, F = 20/21.
        let words: Vec<String> = (0..22).map(|i| format!("w{i}")).collect();
        let claim = words.join(" ");
        let mut changed = words.clone();
        changed[21] = "other".into();
        let sentence = changed.join(" ");
        assert!((rouge2_f(&sentence, &claim) - 20.0 / 21.0).abs() < 1e-12);
        let (kept, removed) = filter_reproductions(vec![sentence], &claim, 0.95, RougeVariant::F);
        assert!(kept.is_empty());
        assert_eq!(removed, 1);

        // With twelve tokens the same edit gives 10/11 < 0.95 and the sentence stays.
        let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let claim = words.join(" ");
        let mut changed = words.clone();
        changed[11] = "other".into();
        let sentence = changed.join(" ");
        assert!((rouge2_f(&sentence, &claim) - 10.0 / 11.0).abs() < 1e-12);
        assert_eq!(filter_reproductions(vec![sentence], &claim, 0.95, RougeVariant::F).1, 0);
    }

    struct Scripted {
        labels: Vec<Vec<NliLabel>>,
        calls: Mutex<usize>,
    }

    impl Judge for Scripted {
        fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliOutcome, ProviderError> {
            *self.calls.lock().unwrap() += 1;
            let i: usize = premise.parse().unwrap();
            let j: usize = hypothesis.parse().unwrap();
            Ok(NliOutcome {
                label: self.labels[i][j],
                parse_failed: false,
            })
        }
    }

    fn fixture(labels: Vec<Vec<NliLabel>>) -> (Vec<String>, SentenceSet, Scripted) {
        let ev = (0..labels.len()).map(|i| i.to_string()).collect();
        let n = labels.first().map_or(0, Vec::len);
        let set = SentenceSet {
            claim_id: "c".into(),
            repeat_index: 0,
            sentences: (0..n).map(|j| j.to_string()).collect(),
            removed_count: 0,
        };
        (ev, set, Scripted { labels, calls: Mutex::new(0) })
    }

    use NliLabel::*;

    #[test]
    fn aggregation_examples() {
        let (ev, set, j) = fixture(vec![vec![Neutral, Entailment, Neutral]]);
        let r = match_document(&ev, &set, &j, true).unwrap();
        assert!(r.matched);
        assert_eq!(r.judgments.len(), 3);

        let (ev, set, j) = fixture(vec![vec![Neutral, Contradiction], vec![Contradiction, Neutral]]);
        let r = match_document(&ev, &set, &j, true).unwrap();
        assert!(!r.matched);
        let order: Vec<(usize, usize)> = r.judgments.iter().map(|j| (j.evidence_index, j.sentence_index)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn empty_sentence_set_is_unmatched_and_flagged() {
        let (ev, set, j) = fixture(vec![vec![]]);
        let r = match_document(&ev, &set, &j, true).unwrap();
        assert!(!r.matched && r.empty_sentence_set && r.judgments.is_empty());
        assert_eq!(*j.calls.lock().unwrap(), 0);
    }

    #[test]
    fn short_circuit_only_when_not_exhaustive() {
        let (ev, set, j) = fixture(vec![vec![Entailment, Neutral], vec![Neutral, Neutral]]);
        let r = match_document(&ev, &set, &j, false).unwrap();
        assert!(r.matched);
        assert_eq!(*j.calls.lock().unwrap(), 1);
        let r = match_document(&ev, &set, &j, true).unwrap();
        assert_eq!(r.judgments.len(), 4);
    }

    #[test]
    fn no_evidence_is_rejected() {
        let (_, set, j) = fixture(vec![vec![Neutral]]);
        assert!(match_document(&[], &set, &j, true).is_err());
    }

    fn rec(repeat: u32, matched: bool) -> MatchRecord {
        MatchRecord {
            claim_id: "c".into(),
            repeat_index: repeat,
            matched,
            judgments: vec![],
            empty_sentence_set: false,
            sentence_count: 0,
            removed_count: 0,
            error: None,
        }
    }

    #[test]
    fn matched_rate_examples() {
        let r = matched_rate(&[rec(0, true), rec(0, true), rec(0, true), rec(0, false)]).unwrap();
        assert_eq!(r.per_repeat[0].rate, 0.75);
        assert_eq!(r.standard_error, 0.0);
        let r = matched_rate(&[rec(0, true), rec(0, false), rec(1, false), rec(1, true)]).unwrap();
        assert_eq!((r.mean, r.standard_error), (0.5, 0.0));
    }

    fn label() -> impl Strategy<Value = NliLabel> {
        prop_oneof![Just(Entailment), Just(Contradiction), Just(Neutral)]
    }

    proptest! {
        #[test]
        fn matched_iff_any_entailment(m in prop::collection::vec(prop::collection::vec(label(), 1..5), 1..4)) {
            let width = m[0].len();
            let m: Vec<Vec<NliLabel>> = m.into_iter().map(|mut r| { r.resize(width, Neutral); r }).collect();
            let expected = m.iter().flatten().any(|l| *l == Entailment);
            let (ev, set, j) = fixture(m);
            prop_assert_eq!(match_document(&ev, &set, &j, true).unwrap().matched, expected);
        }

        #[test]
        fn rouge_is_symmetric_and_bounded(a in "[a-c ]{0,20}", b in "[a-c ]{0,20}") {
            let x = rouge2_f(&a, &b);
            prop_assert_eq!(x, rouge2_f(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn filter_is_sound(claim in "[a-d]( [a-d]){1,8}", sents in prop::collection::vec("[a-d]( [a-d]){0,8}", 0..6)) {
            let (kept, removed) = filter_reproductions(sents.clone(), &claim, 0.95, RougeVariant::F);
            prop_assert_eq!(kept.len() + removed, sents.len());
            for s in &sents {
                prop_assert_eq!(kept.contains(s), rouge2_f(s, &claim) < 0.95);
            }
            for s in &kept {
                prop_assert!(rouge2_f(s, &claim) < 0.95);
            }
        }
    }
}
