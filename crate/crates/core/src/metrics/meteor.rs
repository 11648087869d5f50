//! METEOR with exact and Porter-stem matching stages.
//!
//! The number of matches in each stage is fixed by the token multisets, so the
//! search only has to pick which positions to align to minimize chunks. It is
//! a branch-and-bound over candidate positions with a node budget; past the
//! budget the best alignment found so far is used.

use std::collections::HashMap;

use crate::lexical::porter::stem;
use crate::text::alnum_tokens;

pub const ALPHA: f64 = 0.9;
pub const BETA: f64 = 3.0;
pub const GAMMA: f64 = 0.5;

const NODE_BUDGET: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeteorDetail {
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub fmean: f64,
    pub penalty: f64,
    pub score: f64,
}

struct Search<'a> {
    cand: &'a [(String, String)],
    refs: &'a [(String, String)],
    // Remaining pairs to place, per surface word (exact) and per stem (stem stage).
    exact_quota: HashMap<&'a str, usize>,
    stem_quota: HashMap<&'a str, usize>,
    // Candidate positions left at or after i, per word and per stem.
    cand_left_word: Vec<HashMap<&'a str, usize>>,
    used: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl<'a> Search<'a> {
    fn feasible(&self, i: usize) -> bool {
        let left = &self.cand_left_word[i];
        self.exact_quota
            .iter()
            .all(|(w, &q)| q <= *left.get(w).unwrap_or(&0))
    }

    /// `prev` is the reference position matched by candidate i-1, if any.
    fn dfs(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > NODE_BUDGET {
            return;
        }
        if i == self.cand.len() {
            if self.exact_quota.values().all(|&q| q == 0) && self.stem_quota.values().all(|&q| q == 0) {
                self.best = chunks;
            }
            return;
        }
        if !self.feasible(i) {
            return;
        }
        let (word, st) = (&self.cand[i].0, &self.cand[i].1);
        let mut options: Vec<(usize, bool)> = Vec::new();
        if self.exact_quota.get(word.as_str()).copied().unwrap_or(0) > 0 {
            options.extend(
                (0..self.refs.len())
                    .filter(|&j| !self.used[j] && self.refs[j].0 == *word)
                    .map(|j| (j, true)),
            );
        }
        if self.stem_quota.get(st.as_str()).copied().unwrap_or(0) > 0 {
            options.extend(
                (0..self.refs.len())
                    .filter(|&j| !self.used[j] && self.refs[j].0 != *word && self.refs[j].1 == *st)
                    .map(|j| (j, false)),
            );
        }
        // Continuing the current chunk first finds good bounds early.
        options.sort_by_key(|&(j, _)| (prev.map_or(true, |p| p + 1 != j), j));
        for (j, exact) in options {
            let quota = if exact {
                self.exact_quota.get_mut(word.as_str())
            } else {
                self.stem_quota.get_mut(st.as_str())
            }
            .expect("quota present");
            *quota -= 1;
            self.used[j] = true;
            let extra = usize::from(prev.map_or(true, |p| p + 1 != j));
            self.dfs(i + 1, Some(j), chunks + extra);
            self.used[j] = false;
            let quota = if exact {
                self.exact_quota.get_mut(word.as_str())
            } else {
                self.stem_quota.get_mut(st.as_str())
            }
            .expect("quota present");
            *quota += 1;
        }
        self.dfs(i + 1, None, chunks);
    }
}

fn counts<'a>(items: impl Iterator<Item = &'a str>) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

pub fn meteor_detail(candidate: &str, reference: &str) -> MeteorDetail {
    let tag = |t: String| {
        let s = stem(&t);
        (t, s)
    };
    let cand: Vec<(String, String)> = alnum_tokens(candidate).into_iter().map(tag).collect();
    let refs: Vec<(String, String)> = alnum_tokens(reference).into_iter().map(tag).collect();

    let cw = counts(cand.iter().map(|t| t.0.as_str()));
    let rw = counts(refs.iter().map(|t| t.0.as_str()));
    let exact_quota: HashMap<&str, usize> = cw
        .iter()
        .filter_map(|(w, &c)| rw.get(w).map(|&r| (*w, c.min(r))))
        .collect();
    // Tokens left after the exact stage, grouped by stem.
    fn leftover<'a>(side: &'a [(String, String)], own: &HashMap<&str, usize>, exact: &HashMap<&str, usize>) -> HashMap<&'a str, usize> {
        let mut m: HashMap<&str, usize> = HashMap::new();
        for (w, &c) in own {
            let left = c - exact.get(w).copied().unwrap_or(0);
            if left > 0 {
                let s = side.iter().find(|t| t.0 == *w).expect("present").1.as_str();
                *m.entry(s).or_insert(0) += left;
            }
        }
        m
    }
    let cl = leftover(&cand, &cw, &exact_quota);
    let rl = leftover(&refs, &rw, &exact_quota);
    let stem_quota: HashMap<&str, usize> = cl
        .iter()
        .filter_map(|(s, &c)| rl.get(s).map(|&r| (*s, c.min(r))))
        .collect();
    let matches: usize = exact_quota.values().sum::<usize>() + stem_quota.values().sum::<usize>();
    if matches == 0 {
        return MeteorDetail {
            matches: 0,
            chunks: 0,
            precision: 0.0,
            recall: 0.0,
            fmean: 0.0,
            penalty: 0.0,
            score: 0.0,
        };
    }

    let mut cand_left_word = vec![HashMap::new(); cand.len() + 1];
    for i in (0..cand.len()).rev() {
        let mut m = cand_left_word[i + 1].clone();
        *m.entry(cand[i].0.as_str()).or_insert(0) += 1;
        cand_left_word[i] = m;
    }
    let mut search = Search {
        cand: &cand,
        refs: &refs,
        exact_quota,
        stem_quota,
        cand_left_word,
        used: vec![false; refs.len()],
        best: matches + 1,
        nodes: 0,
    };
    search.dfs(0, None, 0);
    let chunks = search.best.min(matches);

    let precision = matches as f64 / cand.len() as f64;
    let recall = matches as f64 / refs.len() as f64;
    let fmean = precision * recall / (ALPHA * precision + (1.0 - ALPHA) * recall);
    let penalty = GAMMA * (chunks as f64 / matches as f64).powf(BETA);
    MeteorDetail {
        matches,
        chunks,
        precision,
        recall,
        fmean,
        penalty,
        score: fmean * (1.0 - penalty),
    }
}

pub fn meteor(candidate: &str, reference: &str) -> f64 {
    meteor_detail(candidate, reference).score
}
