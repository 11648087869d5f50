//! BM25 over an in-memory inverted index.
//!
//! ```text
//! score(d) = Σ_t idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·len/avglen))
//! idf(t)   = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```
//!
//! Query terms go through the same analyzer as documents and a repeated query
//! term contributes once per occurrence.

mod analyzer;
pub mod porter;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use analyzer::{analyze, analyze_with, is_stopword, AnalyzerSettings, ANALYZER_VERSION};

use crate::error::DataError;
use crate::model::{write_atomic, Corpus};
use crate::ranking::{top_k, Hit, Ranking};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k1 >= 0.0) || !(0.0..=1.0).contains(&self.b) {
            return Err(format!("bm25 parameters out of range: k1={}, b={}", self.k1, self.b));
        }
        Ok(())
    }

    /// Robertson–Spärck Jones idf with the +1 inside the log, never negative.
    pub fn idf(doc_count: usize, df: usize) -> f64 {
        let n = doc_count as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn term_weight(&self, idf: f64, tf: f64, len: f64, avg_len: f64) -> f64 {
        idf * (tf * (self.k1 + 1.0)) / (tf + self.k1 * (1.0 - self.b + self.b * len / avg_len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    analyzer: AnalyzerSettings,
    terms: BTreeMap<String, Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
}

impl InvertedIndex {
    /// Index every document's title-prefixed text.
    pub fn build(corpus: &Corpus, params: Bm25Params, analyzer: AnalyzerSettings) -> Result<Self, DataError> {
        if corpus.is_empty() {
            return Err(DataError::Invalid("cannot index an empty corpus".into()));
        }
        params.validate().map_err(DataError::Config)?;
        let mut terms: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_lens = Vec::with_capacity(corpus.len());
        for (ord, doc) in corpus.documents().iter().enumerate() {
            let tokens = analyze_with(&doc.titled_text(), analyzer);
            doc_ids.push(doc.doc_id.clone());
            doc_lens.push(tokens.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *counts.entry(t).or_default() += 1;
            }
            for (t, tf) in counts {
                terms.entry(t).or_default().push(Posting { doc: ord as u32, tf });
            }
        }
        let avg_len = mean_len(&doc_lens);
        Ok(InvertedIndex {
            params,
            analyzer,
            terms,
            doc_ids,
            doc_lens,
            avg_len,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.doc_ids.iter().position(|d| d == doc_id).map(|i| self.doc_lens[i])
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn analyzer(&self) -> AnalyzerSettings {
        self.analyzer
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.terms.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Top-k documents for `query`, score descending, ties by doc id ascending.
    /// Documents sharing no term with the query are not returned.
    pub fn search(&self, query: &str, k: usize) -> Ranking {
        let k = k.max(1);
        let mut acc = vec![0.0f64; self.doc_ids.len()];
        let mut touched = vec![false; self.doc_ids.len()];
        let n = self.doc_ids.len();
        for term in analyze_with(query, self.analyzer) {
            let postings = self.postings(&term);
            if postings.is_empty() {
                continue;
            }
            let idf = Bm25Params::idf(n, postings.len());
            for p in postings {
                let d = p.doc as usize;
                acc[d] += self.params.term_weight(
                    idf,
                    p.tf as f64,
                    self.doc_lens[d] as f64,
                    self.avg_len,
                );
                touched[d] = true;
            }
        }
        let hits = touched
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(d, _)| Hit {
                doc_id: self.doc_ids[d].clone(),
                score: acc[d],
            })
            .collect();
        top_k(hits, k)
    }

    /// Persist as `manifest.json`, `docs.json` and varint-coded `postings.bin`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let manifest = IndexManifest {
            format_version: INDEX_FORMAT_VERSION,
            analyzer_version: ANALYZER_VERSION.to_owned(),
            analyzer: self.analyzer,
            params: self.params,
            doc_count: self.doc_ids.len(),
            term_count: self.terms.len(),
            total_len: self.doc_lens.iter().map(|&l| l as u64).sum(),
        };
        let docs: Vec<DocEntry> = self
            .doc_ids
            .iter()
            .zip(&self.doc_lens)
            .map(|(id, &len)| DocEntry { doc_id: id.clone(), len })
            .collect();
        let mut bin = Vec::new();
        for (term, postings) in &self.terms {
            put_varint(&mut bin, term.len() as u64);
            bin.extend_from_slice(term.as_bytes());
            put_varint(&mut bin, postings.len() as u64);
            let mut prev = 0u32;
            for p in postings {
                put_varint(&mut bin, (p.doc - prev) as u64);
                put_varint(&mut bin, p.tf as u64);
                prev = p.doc;
            }
        }
        write_atomic(&dir.join("manifest.json"), &to_json(&manifest)?)?;
        write_atomic(&dir.join("docs.json"), &to_json(&docs)?)?;
        write_atomic(&dir.join("postings.bin"), &bin)
    }

    /// Load a persisted index, refusing mismatched format or analyzer versions.
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let manifest: IndexManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != INDEX_FORMAT_VERSION {
            return Err(DataError::Invalid(format!(
                "index format version {} (expected {INDEX_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.analyzer_version != ANALYZER_VERSION {
            return Err(DataError::Invalid(format!(
                "index built with analyzer `{}` (this build uses `{ANALYZER_VERSION}`)",
                manifest.analyzer_version
            )));
        }
        let docs: Vec<DocEntry> = read_json(&dir.join("docs.json"))?;
        let bin_path = dir.join("postings.bin");
        let bin = std::fs::read(&bin_path).map_err(|e| DataError::io(&bin_path, e))?;
        let corrupt = || DataError::Invalid(format!("{}: truncated postings", bin_path.display()));
        let mut cur = &bin[..];
        let mut terms = BTreeMap::new();
        while !cur.is_empty() {
            let len = get_varint(&mut cur).ok_or_else(corrupt)? as usize;
            if cur.len() < len {
                return Err(corrupt());
            }
            let term = std::str::from_utf8(&cur[..len]).map_err(|_| corrupt())?.to_owned();
            cur = &cur[len..];
            let count = get_varint(&mut cur).ok_or_else(corrupt)? as usize;
            let mut postings = Vec::with_capacity(count);
            let mut doc = 0u64;
            for _ in 0..count {
                doc += get_varint(&mut cur).ok_or_else(corrupt)?;
                let tf = get_varint(&mut cur).ok_or_else(corrupt)?;
                if doc as usize >= docs.len() {
                    return Err(corrupt());
                }
                postings.push(Posting { doc: doc as u32, tf: tf as u32 });
            }
            terms.insert(term, postings);
        }
        if docs.len() != manifest.doc_count || terms.len() != manifest.term_count {
            return Err(DataError::Invalid(format!("{}: counts disagree with manifest", dir.display())));
        }
        let doc_lens: Vec<u32> = docs.iter().map(|d| d.len).collect();
        Ok(InvertedIndex {
            params: manifest.params,
            analyzer: manifest.analyzer,
            terms,
            avg_len: mean_len(&doc_lens),
            doc_ids: docs.into_iter().map(|d| d.doc_id).collect(),
            doc_lens,
        })
    }
}

fn mean_len(lens: &[u32]) -> f64 {
    let total: u64 = lens.iter().map(|&l| l as u64).sum();
    total as f64 / lens.len() as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    format_version: u32,
    analyzer_version: String,
    analyzer: AnalyzerSettings,
    params: Bm25Params,
    doc_count: usize,
    term_count: usize,
    total_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DocEntry {
    doc_id: String,
    len: u32,
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, DataError> {
    serde_json::to_vec_pretty(v).map_err(|e| DataError::Invalid(e.to_string()))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::Malformed {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn get_varint(cur: &mut &[u8]) -> Option<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let (&byte, rest) = cur.split_first()?;
        *cur = rest;
        v |= ((byte & 0x7f) as u64) << shift;
        if byte & 0x80 == 0 {
            return Some(v);
        }
    }
    None
}
