//! Retrieval, classification and evidence-text metrics. All values lie in [0, 1].

mod hungarian;
mod meteor;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use hungarian::{brute_force_optimum, hungarian_assign, AssignmentResult};
pub use meteor::{meteor, meteor_detail, MeteorDetail};

use crate::error::{DataError, Error};
use crate::providers::Provider;
use crate::ranking::Hit;

fn check(relevant: &BTreeSet<String>, k: usize) -> Result<(), DataError> {
    if relevant.is_empty() {
        return Err(DataError::Invalid("empty relevant set".into()));
    }
    if k < 1 {
        return Err(DataError::Invalid("k must be >= 1".into()));
    }
    Ok(())
}

pub fn recall_at_k(ranking: &[Hit], relevant: &BTreeSet<String>, k: usize) -> Result<f64, DataError> {
    check(relevant, k)?;
    let found = ranking.iter().take(k).filter(|h| relevant.contains(&h.doc_id)).count();
    Ok(found as f64 / relevant.len() as f64)
}

/// Binary-gain NDCG; the ideal ranking holds min(|relevant|, k) relevant items.
pub fn ndcg_at_k(ranking: &[Hit], relevant: &BTreeSet<String>, k: usize) -> Result<f64, DataError> {
    check(relevant, k)?;
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, h)| relevant.contains(&h.doc_id))
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

/// Unweighted mean of per-label F1 over every label in `labels`.
pub fn macro_f1(predictions: &[String], golds: &[String], labels: &[String]) -> Result<f64, DataError> {
    if predictions.len() != golds.len() {
        return Err(DataError::Invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if labels.is_empty() {
        return Err(DataError::Invalid("empty label set".into()));
    }
    let f1s = labels.iter().map(|l| {
        let tp = predictions.iter().zip(golds).filter(|(p, g)| *p == l && *g == l).count() as f64;
        let pred = predictions.iter().filter(|p| *p == l).count() as f64;
        let gold = golds.iter().filter(|g| *g == l).count() as f64;
        let p = if pred > 0.0 { tp / pred } else { 0.0 };
        let r = if gold > 0.0 { tp / gold } else { 0.0 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    });
    Ok(f1s.sum::<f64>() / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Meteor,
    Bertscore,
}

impl Scorer {
    pub fn display_name(self) -> &'static str {
        match self {
            Scorer::Meteor => "METEOR",
            Scorer::Bertscore => "BERTScore",
        }
    }
}

/// Align retrieved texts with gold texts by maximum-weight assignment under
/// `scorer` and return the score normalized by the gold count.
pub fn evidence_text_score(retrieved: &[String], gold: &[String], scorer: Scorer, provider: Option<&Provider>) -> Result<f64, Error> {
    let matrix: Vec<Vec<f64>> = match scorer {
        Scorer::Meteor => retrieved
            .iter()
            .map(|c| gold.iter().map(|r| meteor(c, r)).collect())
            .collect(),
        Scorer::Bertscore => {
            let provider = provider.ok_or_else(|| {
                crate::error::ProviderError::MissingEndpoint("pair-scoring".into())
            })?;
            provider.score_pairs(retrieved, gold, "bertscore")?
        }
    };
    Ok(hungarian_assign(&matrix).normalized)
}
