//! Stratification into ALL / M / ¬M, aggregation over repeats and report assembly.

mod render;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use render::render_text;
pub use stats::{mann_whitney_exact_p, mann_whitney_normal_p, mann_whitney_u, mean_se, MannWhitney, PMethod, EXACT_MAX_TOTAL};

use crate::config::SignificanceUnit;
use crate::error::DataError;
use crate::matching::{MatchRecord, MatchedRate};
use crate::metrics::macro_f1;

pub const F1: &str = "F1";

/// Partition claims into matched and unmatched for one repeat.
pub fn stratify(claim_ids: &[String], records: &[&MatchRecord]) -> Result<(BTreeSet<String>, BTreeSet<String>), DataError> {
    let wanted: BTreeSet<&str> = claim_ids.iter().map(String::as_str).collect();
    let mut seen: BTreeMap<&str, bool> = BTreeMap::new();
    for r in records {
        if !wanted.contains(r.claim_id.as_str()) {
            return Err(DataError::Invalid(format!("match record for unknown claim {}", r.claim_id)));
        }
        if seen.insert(&r.claim_id, r.matched).is_some() {
            return Err(DataError::Invalid(format!(
                "duplicate match record for claim {} in repeat {}",
                r.claim_id, r.repeat_index
            )));
        }
    }
    let mut m = BTreeSet::new();
    let mut not_m = BTreeSet::new();
    for id in claim_ids {
        match seen.get(id.as_str()) {
            Some(true) => m.insert(id.clone()),
            Some(false) => not_m.insert(id.clone()),
            None => return Err(DataError::Invalid(format!("no match record for claim {id}"))),
        };
    }
    Ok((m, not_m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "ALL")]
    All,
    #[serde(rename = "M")]
    Matched,
    #[serde(rename = "not_M")]
    Unmatched,
}

impl Group {
    pub const ORDER: [Group; 3] = [Group::All, Group::Matched, Group::Unmatched];

    pub fn label(self) -> &'static str {
        match self {
            Group::All => "ALL",
            Group::Matched => "M",
            Group::Unmatched => "\u{ac}M",
        }
    }
}

/// Per-claim scores and verdicts of one system for one repeat.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SystemScores {
    /// metric name → claim id → value.
    pub per_claim: BTreeMap<String, BTreeMap<String, f64>>,
    /// claim id → predicted label.
    pub predictions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub dataset: String,
    pub evaluation: String,
    pub method: String,
    pub baseline: String,
    pub model_id: String,
    pub k: usize,
    pub repeats: usize,
    pub significance_unit: SignificanceUnit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    pub claims_evaluated: usize,
    pub claims_skipped_no_evidence: usize,
    pub claims_dropped_unresolved: usize,
    pub generation_failures: usize,
    pub empty_sentence_sets: usize,
    pub nli_judgments: usize,
    pub nli_parse_failures: usize,
    pub verdict_parse_failures: usize,
    pub verdicts_without_evidence: usize,
}

pub struct ReportInput {
    pub header: ReportHeader,
    /// Per-claim metric names in column order; F1 is appended when gold labels exist.
    pub metrics: Vec<String>,
    pub labels: Vec<String>,
    /// Evaluated claims and their gold labels.
    pub gold: BTreeMap<String, Option<String>>,
    pub baseline: SystemScores,
    /// Indexed by repeat.
    pub expanded: Vec<SystemScores>,
    pub matches: Vec<MatchRecord>,
    pub matched_rate: MatchedRate,
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub standard_error: f64,
    pub n_repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub group: Group,
    pub claims: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: Group,
    pub claims_per_repeat: Vec<usize>,
    /// Absent metrics had no claims in this group in any repeat.
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeat_index: Option<u32>,
    pub n_a: usize,
    pub n_b: usize,
    pub u: f64,
    pub p: f64,
    pub method: PMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub unit: SignificanceUnit,
    pub tests: Vec<TestResult>,
    /// Largest p over the tests; the conservative summary.
    pub p_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    /// Expansion vs baseline on per-claim scores (expansion averaged over repeats).
    pub expanded_vs_baseline: BTreeMap<String, Comparison>,
    pub matched_vs_unmatched: BTreeMap<String, Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    #[serde(flatten)]
    pub header: ReportHeader,
    pub metrics: Vec<String>,
    pub baseline: BaselineRow,
    pub expanded: Vec<GroupRow>,
    pub matched_rate: MatchedRate,
    pub significance: Significance,
    pub flags: Flags,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// A metric's value over a set of claims: the mean of per-claim values, or
/// macro F1 over the claims that have gold labels.
fn group_value(input: &ReportInput, scores: &SystemScores, metric: &str, claims: &BTreeSet<String>) -> Result<Option<f64>, DataError> {
    if metric == F1 {
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        for c in claims {
            if let (Some(Some(g)), Some(p)) = (input.gold.get(c), scores.predictions.get(c)) {
                preds.push(p.clone());
                golds.push(g.clone());
            }
        }
        if preds.is_empty() {
            return Ok(None);
        }
        return macro_f1(&preds, &golds, &input.labels).map(Some);
    }
    let values = scores.per_claim.get(metric);
    let v: Vec<f64> = claims
        .iter()
        .filter_map(|c| values.and_then(|m| m.get(c)).copied())
        .collect();
    Ok(mean(&v))
}

fn round4(x: f64) -> f64 {
    let r = (x * 1e4).round() / 1e4;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn test(a: &[f64], b: &[f64], repeat_index: Option<u32>) -> Result<Option<TestResult>, DataError> {
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let r = mann_whitney_u(a, b)?;
    Ok(Some(TestResult {
        repeat_index,
        n_a: a.len(),
        n_b: b.len(),
        u: r.u,
        p: round4(r.p),
        method: r.method,
    }))
}

fn comparison(unit: SignificanceUnit, tests: Vec<TestResult>) -> Option<Comparison> {
    let p_max = tests.iter().map(|t| t.p).fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))))?;
    Some(Comparison { unit, tests, p_max })
}

pub fn build_report(input: &ReportInput) -> Result<StratifiedReport, DataError> {
    let repeats = input.header.repeats;
    if input.expanded.len() != repeats {
        return Err(DataError::Invalid(format!(
            "{} expanded score sets for {repeats} repeats",
            input.expanded.len()
        )));
    }
    let claim_ids: Vec<String> = input.gold.keys().cloned().collect();
    let all: BTreeSet<String> = claim_ids.iter().cloned().collect();

    let mut metrics = input.metrics.clone();
    if input.gold.values().any(Option::is_some) && !metrics.iter().any(|m| m == F1) {
        metrics.push(F1.to_owned());
    }

    // Partition per repeat.
    let mut strata: Vec<BTreeMap<Group, BTreeSet<String>>> = Vec::with_capacity(repeats);
    for r in 0..repeats as u32 {
        let recs: Vec<&MatchRecord> = input
            .matches
            .iter()
            .filter(|m| m.repeat_index == r && all.contains(&m.claim_id))
            .collect();
        let (m, not_m) = stratify(&claim_ids, &recs)?;
        debug_assert_eq!(m.len() + not_m.len(), all.len());
        strata.push(BTreeMap::from([
            (Group::All, all.clone()),
            (Group::Matched, m),
            (Group::Unmatched, not_m),
        ]));
    }

    let mut baseline_values = BTreeMap::new();
    for metric in &metrics {
        if let Some(v) = group_value(input, &input.baseline, metric, &all)? {
            baseline_values.insert(metric.clone(), round4(v));
        }
    }
    let baseline = BaselineRow {
        group: Group::All,
        claims: all.len(),
        values: baseline_values,
    };

    // Group value per (group, metric, repeat).
    let mut per_repeat: BTreeMap<(Group, String), Vec<Option<f64>>> = BTreeMap::new();
    for group in Group::ORDER {
        for metric in &metrics {
            let vals = (0..repeats)
                .map(|r| group_value(input, &input.expanded[r], metric, &strata[r][&group]))
                .collect::<Result<Vec<_>, _>>()?;
            per_repeat.insert((group, metric.clone()), vals);
        }
    }

    let mut expanded = Vec::new();
    for group in Group::ORDER {
        let mut cells = BTreeMap::new();
        for metric in &metrics {
            let vals: Vec<f64> = per_repeat[&(group, metric.clone())].iter().flatten().copied().collect();
            if vals.is_empty() {
                continue;
            }
            let (m, se) = mean_se(&vals)?;
            cells.insert(
                metric.clone(),
                Cell {
                    mean: round4(m),
                    standard_error: round4(se),
                    n_repeats: vals.len(),
                },
            );
        }
        expanded.push(GroupRow {
            group,
            claims_per_repeat: strata.iter().map(|s| s[&group].len()).collect(),
            cells,
        });
    }

    let mut significance = Significance::default();
    for metric in metrics.iter().filter(|m| *m != F1) {
        // Expansion vs baseline, per claim.
        let mut a = Vec::new();
        let mut b = Vec::new();
        for c in &claim_ids {
            let per_rep: Vec<f64> = input
                .expanded
                .iter()
                .filter_map(|s| s.per_claim.get(metric).and_then(|m| m.get(c)).copied())
                .collect();
            let base = input.baseline.per_claim.get(metric).and_then(|m| m.get(c)).copied();
            if let (Some(e), Some(bv)) = (mean(&per_rep), base) {
                a.push(e);
                b.push(bv);
            }
        }
        if let Some(t) = test(&a, &b, None)? {
            if let Some(cmp) = comparison(SignificanceUnit::PerClaim, vec![t]) {
                significance.expanded_vs_baseline.insert(metric.clone(), cmp);
            }
        }
    }
    for metric in &metrics {
        let unit = input.header.significance_unit;
        let tests = match unit {
            SignificanceUnit::PerClaim => {
                if metric == F1 {
                    continue;
                }
                let mut tests = Vec::new();
                for (r, s) in strata.iter().enumerate() {
                    let values = input.expanded[r].per_claim.get(metric);
                    let pick = |g: Group| -> Vec<f64> {
                        s[&g].iter()
                            .filter_map(|c| values.and_then(|m| m.get(c)).copied())
                            .collect()
                    };
                    if let Some(t) = test(&pick(Group::Matched), &pick(Group::Unmatched), Some(r as u32))? {
                        tests.push(t);
                    }
                }
                tests
            }
            SignificanceUnit::PerRepeat => {
                let m: Vec<f64> = per_repeat[&(Group::Matched, metric.clone())].iter().flatten().copied().collect();
                let u: Vec<f64> = per_repeat[&(Group::Unmatched, metric.clone())].iter().flatten().copied().collect();
                test(&m, &u, None)?.into_iter().collect()
            }
        };
        if let Some(cmp) = comparison(unit, tests) {
            significance.matched_vs_unmatched.insert(metric.clone(), cmp);
        }
    }

    let mut matched_rate = input.matched_rate.clone();
    matched_rate.mean = round4(matched_rate.mean);
    matched_rate.standard_error = round4(matched_rate.standard_error);
    for r in &mut matched_rate.per_repeat {
        r.rate = round4(r.rate);
    }

    Ok(StratifiedReport {
        header: input.header.clone(),
        metrics,
        baseline,
        expanded,
        matched_rate,
        significance,
        flags: input.flags.clone(),
    })
}

pub fn report_json(report: &StratifiedReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::matched_rate;

    fn rec(id: &str, repeat: u32, matched: bool) -> MatchRecord {
        MatchRecord {
            claim_id: id.into(),
            repeat_index: repeat,
            matched,
            judgments: vec![],
            empty_sentence_set: false,
            sentence_count: 1,
            removed_count: 0,
            error: None,
        }
    }

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn stratify_examples() {
        let claims = ids(&["1", "2", "3", "4"]);
        let recs = [rec("1", 0, true), rec("2", 0, false), rec("3", 0, true), rec("4", 0, false)];
        let refs: Vec<&MatchRecord> = recs.iter().collect();
        let (m, n) = stratify(&claims, &refs).unwrap();
        assert_eq!(m, ["1", "3"].iter().map(|s| s.to_string()).collect());
        assert_eq!(n, ["2", "4"].iter().map(|s| s.to_string()).collect());

        let all = [rec("1", 0, true), rec("2", 0, true)];
        let (_, n) = stratify(&ids(&["1", "2"]), &all.iter().collect::<Vec<_>>()).unwrap();
        assert!(n.is_empty());
    }

    #[test]
    fn stratify_errors_name_the_claim() {
        let recs = [rec("1", 0, true)];
        let err = stratify(&ids(&["1", "2"]), &recs.iter().collect::<Vec<_>>()).unwrap_err();
        assert!(err.to_string().contains('2'));
        let dup = [rec("1", 0, true), rec("1", 0, false)];
        assert!(stratify(&ids(&["1"]), &dup.iter().collect::<Vec<_>>()).is_err());
    }

    fn header(repeats: usize, unit: SignificanceUnit) -> ReportHeader {
        ReportHeader {
            dataset: "fever".into(),
            evaluation: "document ids".into(),
            method: "Query2doc".into(),
            baseline: "BM25".into(),
            model_id: "m".into(),
            k: 5,
            repeats,
            significance_unit: unit,
        }
    }

    /// Ten claims; the first four are matched in every repeat and score higher.
    fn dominated_input(repeats: usize, unit: SignificanceUnit) -> ReportInput {
        let claims: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let gold = claims
            .iter()
            .map(|c| (c.clone(), Some(if c < &"c5".to_string() { "A" } else { "B" }.to_string())))
            .collect();
        let mut expanded = Vec::new();
        let mut matches = Vec::new();
        for r in 0..repeats {
            let mut s = SystemScores::default();
            for (i, c) in claims.iter().enumerate() {
                let v = if i < 4 { 0.9 + 0.01 * (i + r) as f64 } else { 0.1 + 0.01 * (i + r) as f64 };
                s.per_claim.entry("Recall@5".into()).or_default().insert(c.clone(), v);
                s.per_claim.entry("NDCG@5".into()).or_default().insert(c.clone(), v / 2.0);
                s.predictions.insert(c.clone(), "A".into());
                matches.push(rec(c, r as u32, i < 4));
            }
            expanded.push(s);
        }
        let mut baseline = SystemScores::default();
        for c in &claims {
            baseline.per_claim.entry("Recall@5".into()).or_default().insert(c.clone(), 0.3);
            baseline.per_claim.entry("NDCG@5".into()).or_default().insert(c.clone(), 0.2);
            baseline.predictions.insert(c.clone(), "B".into());
        }
        let rate = matched_rate(&matches).unwrap();
        ReportInput {
            header: header(repeats, unit),
            metrics: vec!["Recall@5".into(), "NDCG@5".into()],
            labels: vec!["A".into(), "B".into()],
            gold,
            baseline,
            expanded,
            matches,
            matched_rate: rate,
            flags: Flags::default(),
        }
    }

    #[test]
    fn report_shape() {
        let rep = build_report(&dominated_input(8, SignificanceUnit::PerClaim)).unwrap();
        assert_eq!(rep.metrics, ["Recall@5", "NDCG@5", "F1"]);
        assert_eq!(rep.expanded.len(), 3);
        let cells: usize = rep.expanded.iter().map(|g| g.cells.iter().filter(|(m, _)| *m != F1).count()).sum();
        assert_eq!(cells, 6);
        for g in &rep.expanded {
            assert!(g.cells.values().all(|c| c.n_repeats == 8));
        }
        assert_eq!(rep.expanded[1].claims_per_repeat, vec![4; 8]);
        assert_eq!(rep.expanded[2].claims_per_repeat, vec![6; 8]);
        assert_eq!(rep.matched_rate.mean, 0.4);
    }

    #[test]
    fn dominating_group_is_significant() {
        for unit in [SignificanceUnit::PerClaim, SignificanceUnit::PerRepeat] {
            let rep = build_report(&dominated_input(8, unit)).unwrap();
            let m = rep.expanded[1].cells["Recall@5"].mean;
            let n = rep.expanded[2].cells["Recall@5"].mean;
            assert!(m > n);
            let cmp = &rep.significance.matched_vs_unmatched["Recall@5"];
            assert_eq!(cmp.unit, unit);
            assert!(cmp.p_max < 0.05, "{unit:?}: {}", cmp.p_max);
        }
    }

    #[test]
    fn empty_group_is_omitted() {
        let mut input = dominated_input(2, SignificanceUnit::PerClaim);
        for m in &mut input.matches {
            m.matched = true;
        }
        let rep = build_report(&input).unwrap();
        assert!(rep.expanded[2].cells.is_empty());
        assert_eq!(rep.expanded[2].claims_per_repeat, vec![0, 0]);
        assert!(rep.significance.matched_vs_unmatched.is_empty());
    }

    #[test]
    fn inconsistent_repeats_are_rejected() {
        let mut input = dominated_input(2, SignificanceUnit::PerClaim);
        input.header.repeats = 3;
        assert!(build_report(&input).is_err());
    }

    #[test]
    fn json_is_deterministic() {
        let a = report_json(&build_report(&dominated_input(3, SignificanceUnit::PerClaim)).unwrap());
        let b = report_json(&build_report(&dominated_input(3, SignificanceUnit::PerClaim)).unwrap());
        assert_eq!(a, b);
        assert!(a.contains("\"significance_unit\": \"per_claim\""));
    }
}
