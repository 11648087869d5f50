use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::ProviderError;
use crate::model::write_atomic;

/// Content hash over everything that can change an endpoint's answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    kind: &'static str,
    digest: String,
}

#[derive(Serialize)]
struct KeyMaterial<'a, P: Serialize> {
    kind: &'a str,
    model_id: &'a str,
    input: &'a str,
    params: P,
    repeat_index: u32,
}

impl CacheKey {
    pub fn new<P: Serialize>(kind: &'static str, model_id: &str, input: &str, params: P, repeat_index: u32) -> Self {
        let material = KeyMaterial {
            kind,
            model_id,
            input,
            params,
            repeat_index,
        };
        let bytes = serde_json::to_vec(&material).expect("key material serializes");
        CacheKey {
            kind,
            digest: hex::encode(Sha256::digest(bytes)),
        }
    }

    pub fn kind(&self) -> &str {
        self.kind
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }
}

/// Content-addressed response cache. Entries are written once and never modified.
#[derive(Debug)]
pub struct DiskCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskCache {
            root: root.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root
            .join(key.kind())
            .join(&key.digest()[..2])
            .join(format!("{}.json", key.digest()))
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        std::fs::read_to_string(self.path_for(key)).ok()
    }

    pub fn put(&self, key: &CacheKey, value: &str) -> Result<(), ProviderError> {
        let path = self.path_for(key);
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        if path.exists() {
            return Ok(());
        }
        write_atomic(&path, value.as_bytes()).map_err(|e| ProviderError::Cache(e.to_string()))
    }
}
