//! Exact inner-product search over corpus embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DataError, Error, ProviderError};
use crate::expansion::hyde_query_vector;
use crate::model::{write_atomic, Corpus};
use crate::providers::{EmbeddingVector, Provider};
use crate::ranking::{top_k, Hit, Ranking};

pub const VECTOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    model_id: String,
    dim: usize,
    doc_ids: Vec<String>,
    /// Row-major, one row per document.
    matrix: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_id: String,
    dim: usize,
    count: usize,
    checksum: String,
}

fn checksum(matrix_bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(matrix_bytes))
}

impl VectorIndex {
    pub fn from_rows(model_id: &str, doc_ids: Vec<String>, rows: &[EmbeddingVector]) -> Result<Self, ProviderError> {
        if rows.is_empty() || rows.len() != doc_ids.len() {
            return Err(ProviderError::Precondition(format!(
                "{} rows for {} documents",
                rows.len(),
                doc_ids.len()
            )));
        }
        let dim = rows[0].dim();
        let mut matrix = Vec::with_capacity(dim * rows.len());
        for (row, id) in rows.iter().zip(&doc_ids) {
            if row.dim() != dim || dim == 0 {
                return Err(ProviderError::DimMismatch {
                    expected: dim,
                    actual: row.dim(),
                    context: Some(format!("document {id}")),
                });
            }
            let converted: Vec<f32> = row.values.iter().map(|&x| x as f32).collect();
            if converted.iter().any(|x| !x.is_finite()) {
                return Err(ProviderError::BadResponse {
                    endpoint: "embeddings".into(),
                    message: format!("non-finite embedding for document {id}"),
                });
            }
            matrix.extend(converted);
        }
        Ok(VectorIndex {
            model_id: model_id.to_owned(),
            dim,
            doc_ids,
            matrix,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn check_model(&self, model_id: &str) -> Result<(), ProviderError> {
        if self.model_id != model_id {
            return Err(ProviderError::Precondition(format!(
                "vector index was built with `{}` but the provider is configured for `{model_id}`",
                self.model_id
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let bytes: Vec<u8> = self.matrix.iter().flat_map(|x| x.to_le_bytes()).collect();
        let manifest = Manifest {
            format_version: VECTOR_FORMAT_VERSION,
            model_id: self.model_id.clone(),
            dim: self.dim,
            count: self.doc_ids.len(),
            checksum: checksum(&bytes),
        };
        write_atomic(&dir.join("vectors.f32"), &bytes)?;
        let ids = serde_json::to_vec(&self.doc_ids).expect("ids serialize");
        write_atomic(&dir.join("doc_ids.json"), &ids)?;
        let m = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join("manifest.json"), &m)
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let manifest: Manifest = crate::lexical::read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != VECTOR_FORMAT_VERSION {
            return Err(DataError::Invalid(format!(
                "vector index format {} is not supported (expected {VECTOR_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let path = dir.join("vectors.f32");
        let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
        if checksum(&bytes) != manifest.checksum {
            return Err(DataError::Invalid(format!("{}: checksum mismatch", path.display())));
        }
        if bytes.len() != manifest.dim * manifest.count * 4 {
            return Err(DataError::Invalid(format!("{}: unexpected size", path.display())));
        }
        let doc_ids: Vec<String> = crate::lexical::read_json(&dir.join("doc_ids.json"))?;
        if doc_ids.len() != manifest.count {
            return Err(DataError::Invalid("doc id count does not match manifest".into()));
        }
        let matrix = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(VectorIndex {
            model_id: manifest.model_id,
            dim: manifest.dim,
            doc_ids,
            matrix,
        })
    }
}

/// Embed every document (title prepended) in bounded-parallel batches.
pub fn build_vector_index(corpus: &Corpus, provider: &Provider, model_id: &str, batch_size: usize) -> Result<VectorIndex, Error> {
    use rayon::prelude::*;

    if corpus.is_empty() {
        return Err(DataError::Invalid("cannot index an empty corpus".into()).into());
    }
    let docs = corpus.documents();
    let texts: Vec<String> = docs.iter().map(|d| d.titled_text()).collect();
    let batches: Vec<Vec<EmbeddingVector>> = provider.pool().install(|| {
        texts
            .par_chunks(batch_size.max(1))
            .map(|chunk| provider.embed(model_id, chunk))
            .collect::<Result<_, _>>()
    })?;
    let rows: Vec<EmbeddingVector> = batches.into_iter().flatten().collect();
    if let Some(advertised) = provider.health()?.and_then(|h| h.embedding_dim) {
        if rows[0].dim() != advertised {
            return Err(ProviderError::DimMismatch {
                expected: advertised,
                actual: rows[0].dim(),
                context: Some("embedding endpoint /health".into()),
            }
            .into());
        }
    }
    let ids = docs.iter().map(|d| d.doc_id.clone()).collect();
    Ok(VectorIndex::from_rows(model_id, ids, &rows)?)
}

/// Top-k documents by raw inner product, scanning every row.
pub fn dense_search(index: &VectorIndex, query: &EmbeddingVector, k: usize) -> Result<Ranking, ProviderError> {
    if query.dim() != index.dim {
        return Err(ProviderError::DimMismatch {
            expected: index.dim,
            actual: query.dim(),
            context: Some("query vector".into()),
        });
    }
    let hits = (0..index.len())
        .map(|i| Hit {
            doc_id: index.doc_ids[i].clone(),
            score: index
                .row(i)
                .iter()
                .zip(&query.values)
                .map(|(&a, b)| f64::from(a) * b)
                .sum(),
        })
        .collect();
    Ok(top_k(hits, k))
}

/// Embed the claim and its first `n_docs` pseudo-documents, compose them into
/// one query vector and search.
pub fn hyde_search(
    claim_id: &str,
    claim_text: &str,
    pseudo_docs: &[&str],
    index: &VectorIndex,
    provider: &Provider,
    model_id: &str,
    k: usize,
    n_docs: usize,
) -> Result<Ranking, Error> {
    if pseudo_docs.len() < n_docs || n_docs == 0 {
        return Err(DataError::Invalid(format!(
            "claim {claim_id}: {} pseudo-documents available, {n_docs} required",
            pseudo_docs.len()
        ))
        .into());
    }
    index.check_model(model_id)?;
    let mut texts = vec![claim_text.to_owned()];
    texts.extend(pseudo_docs[..n_docs].iter().map(|s| s.to_string()));
    let vecs = provider.embed(model_id, &texts)?;
    let q = hyde_query_vector(&vecs[0], &vecs[1..])?;
    Ok(dense_search(index, &q, k)?)
}

/// Plain dense retrieval with the claim alone.
pub fn claim_search(claim_text: &str, index: &VectorIndex, provider: &Provider, model_id: &str, k: usize) -> Result<Ranking, Error> {
    index.check_model(model_id)?;
    let v = provider.embed(model_id, &[claim_text.to_owned()])?;
    Ok(dense_search(index, &v[0], k)?)
}
