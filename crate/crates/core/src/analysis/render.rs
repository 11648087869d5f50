//! Aligned text rendering of a report. Metrics are shown ×100 with one decimal.

use super::{Comparison, Group, StratifiedReport, F1};
use crate::config::SignificanceUnit;

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

fn unit_name(u: SignificanceUnit) -> &'static str {
    match u {
        SignificanceUnit::PerClaim => "per claim",
        SignificanceUnit::PerRepeat => "per repeat",
    }
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{:<w$}", s, w = widths[i]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn cell_text(report: &StratifiedReport, group: usize, metric: &str) -> String {
    match report.expanded[group].cells.get(metric) {
        Some(c) => format!("{} \u{b1} {}", pct(c.mean), pct(c.standard_error)),
        None => "-".into(),
    }
}

fn claims_text(counts: &[usize]) -> String {
    if counts.is_empty() {
        return "-".into();
    }
    format!("{:.1}", counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

fn comparison_line(metric: &str, c: &Comparison) -> Vec<String> {
    let mut row = vec![format!("  {metric}")];
    if c.tests.len() == 1 {
        let t = &c.tests[0];
        row.push(format!("U = {}", t.u));
        row.push(format!("p = {:.4}", t.p));
        row.push(format!("({}, n = {}/{})", match t.method {
            super::PMethod::Exact => "exact",
            super::PMethod::Normal => "normal",
        }, t.n_a, t.n_b));
    } else {
        row.push(format!("{} tests", c.tests.len()));
        row.push(format!("max p = {:.4}", c.p_max));
    }
    row
}

pub fn render_text(report: &StratifiedReport) -> String {
    let h = &report.header;
    let mut out = String::new();
    out.push_str(&format!(
        "Dataset: {}    Evidence: {}    Method: {}    Model: {}\n",
        h.dataset, h.evaluation, h.method, h.model_id
    ));
    out.push_str(&format!(
        "Repeats: {}    k: {}    Significance unit: {}\n\n",
        h.repeats,
        h.k,
        unit_name(h.significance_unit)
    ));

    out.push_str("Retrieval and verdict performance (x100)\n");
    let mut rows = vec![{
        let mut r = vec!["Method".to_owned()];
        r.extend(report.metrics.iter().cloned());
        r
    }];
    let baseline_row = |first: Vec<String>| {
        let mut r = first;
        r.extend(report.metrics.iter().map(|m| report.baseline.values.get(m).map_or("-".into(), |v| pct(*v))));
        r
    };
    rows.push(baseline_row(vec![h.baseline.clone()]));
    let mut r = vec![h.method.clone()];
    r.extend(report.metrics.iter().map(|m| cell_text(report, 0, m)));
    rows.push(r);
    out.push_str(&table(&rows));
    out.push('\n');

    out.push_str("Performance by match condition (x100)\n");
    let mut rows = vec![{
        let mut r = vec!["Method".to_owned(), "Data".to_owned(), "Claims".to_owned()];
        r.extend(report.metrics.iter().cloned());
        r
    }];
    rows.push(baseline_row(vec![h.baseline.clone(), Group::All.label().into(), report.baseline.claims.to_string()]));
    for (i, g) in Group::ORDER.iter().enumerate() {
        let name = if i == 0 { h.method.clone() } else { String::new() };
        let mut r = vec![name, g.label().into(), claims_text(&report.expanded[i].claims_per_repeat)];
        r.extend(report.metrics.iter().map(|m| cell_text(report, i, m)));
        rows.push(r);
    }
    out.push_str(&table(&rows));
    out.push('\n');

    out.push_str(&format!(
        "Matched claims (x100): {} \u{b1} {}\n\n",
        pct(report.matched_rate.mean),
        pct(report.matched_rate.standard_error)
    ));

    out.push_str("Mann-Whitney U tests (two-sided)\n");
    // Rows of every block share one column layout; block titles sit outside it.
    let mut blocks: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    let sig = &report.significance;
    for (title, map) in [
        (format!("{} vs {} (per claim)", h.method, h.baseline), &sig.expanded_vs_baseline),
        (
            format!("M vs {} ({})", Group::Unmatched.label(), unit_name(h.significance_unit)),
            &sig.matched_vs_unmatched,
        ),
    ] {
        let rows: Vec<Vec<String>> = report
            .metrics
            .iter()
            .filter_map(|m| map.get(m).map(|c| comparison_line(m, c)))
            .collect();
        if !rows.is_empty() {
            blocks.push((title, rows));
        }
    }
    if blocks.is_empty() {
        out.push_str("  none\n");
    }
    let all_rows: Vec<Vec<String>> = blocks.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    let rendered = table(&all_rows);
    let mut lines = rendered.lines();
    for (title, rows) in &blocks {
        out.push_str(title);
        out.push('\n');
        for _ in rows {
            out.push_str(lines.next().expect("one line per row"));
            out.push('\n');
        }
    }
    if report.metrics.iter().any(|m| m == F1) && h.significance_unit == SignificanceUnit::PerClaim {
        out.push_str("  F1 has no per-claim value and is not tested per claim.\n");
    }
    out.push('\n');

    let f = &report.flags;
    out.push_str("Flags\n");
    let rows: Vec<Vec<String>> = [
        ("claims evaluated", f.claims_evaluated),
        ("claims skipped (no gold evidence)", f.claims_skipped_no_evidence),
        ("claims dropped (unresolved evidence)", f.claims_dropped_unresolved),
        ("generation failures", f.generation_failures),
        ("empty sentence sets", f.empty_sentence_sets),
        ("NLI judgments", f.nli_judgments),
        ("NLI parse failures", f.nli_parse_failures),
        ("verdict parse failures", f.verdict_parse_failures),
        ("verdicts without evidence", f.verdicts_without_evidence),
    ]
    .iter()
    .map(|(k, v)| vec![format!("  {k}"), v.to_string()])
    .collect();
    out.push_str(&table(&rows));
    out
}
