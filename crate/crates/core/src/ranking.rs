use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

/// Retrieved documents, best first.
pub type Ranking = Vec<Hit>;

/// Score descending, then doc id ascending.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Keep the best `k` hits in ranking order.
pub fn top_k(mut hits: Vec<Hit>, k: usize) -> Ranking {
    if k == 0 {
        return Vec::new();
    }
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_by(hit_order);
    hits
}

/// Which retriever produced a ranking: the claim alone, or the expanded query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Baseline,
    Expanded,
}

/// One persisted ranking. Baseline rankings use repeat 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub claim_id: String,
    pub system: System,
    pub repeat_index: u32,
    pub hits: Ranking,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(id: &str, s: f64) -> Hit {
        Hit { doc_id: id.into(), score: s }
    }

    #[test]
    fn ties_break_by_doc_id() {
        let r = top_k(vec![h("b", 1.0), h("a", 1.0), h("c", 2.0), h("d", 0.5)], 3);
        let ids: Vec<_> = r.iter().map(|x| x.doc_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn short_input_is_fully_sorted() {
        assert_eq!(top_k(vec![h("x", 0.1), h("y", 0.2)], 10).len(), 2);
    }
}
