use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DataError, ProviderError};
use crate::model::write_atomic;

/// Precomputed pair scores keyed by the SHA-256 of each text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreFixture {
    pub scorer: String,
    pub entries: BTreeMap<String, f64>,
}

fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn pair_key(candidate: &str, reference: &str) -> String {
    format!("{}:{}", text_hash(candidate), text_hash(reference))
}

impl ScoreFixture {
    pub fn new(scorer: &str) -> Self {
        ScoreFixture {
            scorer: scorer.to_owned(),
            entries: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, candidates: &[String], references: &[String], matrix: &[Vec<f64>]) {
        for (c, row) in candidates.iter().zip(matrix) {
            for (r, &v) in references.iter().zip(row) {
                self.entries.insert(pair_key(c, r), v);
            }
        }
    }

    pub fn lookup(&self, candidates: &[String], references: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        candidates
            .iter()
            .map(|c| {
                references
                    .iter()
                    .map(|r| {
                        self.entries.get(&pair_key(c, r)).copied().ok_or_else(|| {
                            ProviderError::Precondition(format!(
                                "score fixture has no entry for candidate {:?} / reference {:?}",
                                c, r
                            ))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        crate::lexical::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| DataError::Invalid(e.to_string()))?;
        write_atomic(path, &bytes)
    }
}
