//! OpenAI-compatible chat/embeddings client plus the sidecar's `/nli`, `/score`
//! and `/health` endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, ChatRequest, Health};
use crate::error::ProviderError;

pub const API_KEY_ENV: &str = "QELEAK_API_KEY";

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    api_base: Option<String>,
    sidecar_base: Option<String>,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(
        api_base: Option<String>,
        sidecar_base: Option<String>,
        timeout: Duration,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport {
                endpoint: "client".into(),
                message: e.to_string(),
            })?;
        let trim = |s: String| s.trim_end_matches('/').to_owned();
        Ok(HttpBackend {
            client,
            api_base: api_base.map(trim),
            sidecar_base: sidecar_base.map(trim),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        })
    }

    fn base(&self, which: &str, base: &Option<String>) -> Result<String, ProviderError> {
        base.clone()
            .ok_or_else(|| ProviderError::MissingEndpoint(which.to_owned()))
    }

    /// Embeddings come from the sidecar when one is configured.
    fn embed_base(&self) -> Result<String, ProviderError> {
        self.sidecar_base
            .clone()
            .or_else(|| self.api_base.clone())
            .ok_or_else(|| ProviderError::MissingEndpoint("embeddings".into()))
    }

    fn send(&self, url: &str, body: Option<&Value>) -> Result<Value, ProviderError> {
        let mut req = match body {
            Some(b) => self.client.post(url).json(b),
            None => self.client.get(url),
        };
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderError::Transport {
            endpoint: url.to_owned(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ProviderError::Transport {
            endpoint: url.to_owned(),
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(ProviderError::Protocol {
                endpoint: url.to_owned(),
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::BadResponse {
            endpoint: url.to_owned(),
            message: e.to_string(),
        })
    }
}

fn bad(endpoint: &str, message: impl Into<String>) -> ProviderError {
    ProviderError::BadResponse {
        endpoint: endpoint.to_owned(),
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    scorer: &'a str,
    candidates: &'a [String],
    references: &'a [String],
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let url = format!("{}/v1/chat/completions", self.base("chat", &self.api_base)?);
        let body = json!({
            "model": req.model_id,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
        });
        let v = self.send(&url, Some(&body))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| bad(&url, "missing choices[0].message.content"))
    }

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let url = format!("{}/v1/embeddings", self.embed_base()?);
        let v = self.send(&url, Some(&json!({"model": model_id, "input": texts})))?;
        let mut resp: EmbeddingResponse =
            serde_json::from_value(v).map_err(|e| bad(&url, e.to_string()))?;
        if resp.data.len() != texts.len() {
            return Err(bad(&url, format!("{} vectors for {} inputs", resp.data.len(), texts.len())));
        }
        if resp.data.iter().all(|d| d.index.is_some()) {
            resp.data.sort_by_key(|d| d.index);
        }
        Ok(resp.data.into_iter().map(|d| d.embedding).collect())
    }

    fn nli(&self, premise: &str, hypothesis: &str) -> Result<String, ProviderError> {
        let url = format!("{}/nli", self.base("nli", &self.sidecar_base)?);
        let v = self.send(&url, Some(&json!({"premise": premise, "hypothesis": hypothesis})))?;
        v.get("label")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| bad(&url, "missing label"))
    }

    fn score(&self, scorer: &str, candidates: &[String], references: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let url = format!("{}/score", self.base("pair-scoring", &self.sidecar_base)?);
        let body = serde_json::to_value(ScoreRequest {
            scorer,
            candidates,
            references,
        })
        .expect("request serializes");
        let v = self.send(&url, Some(&body))?;
        serde_json::from_value(v.get("matrix").cloned().unwrap_or(Value::Null))
            .map_err(|e| bad(&url, format!("matrix: {e}")))
    }

    fn health(&self) -> Result<Option<Health>, ProviderError> {
        let Some(base) = &self.sidecar_base else {
            return Ok(None);
        };
        let url = format!("{base}/health");
        let v = self.send(&url, None)?;
        serde_json::from_value(v)
            .map(Some)
            .map_err(|e| bad(&url, e.to_string()))
    }
}
