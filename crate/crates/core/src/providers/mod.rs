//! Model endpoints behind one wire protocol, with a content-addressed cache,
//! bounded retries and bounded request parallelism.

mod cache;
pub mod http;
pub mod mock;
pub mod nli;
mod score;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{CacheKey, DiskCache};
pub use http::HttpBackend;
pub use mock::MockBackend;
pub use nli::{parse_nli_label, render_nli_prompt, NliLabel, NliOutcome};
pub use score::ScoreFixture;

use crate::config::{GenParams, NliBackend, RunConfig};
use crate::error::{DataError, Error, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Distinguishes otherwise identical sampled requests.
    pub repeat_index: u32,
}

impl ChatRequest {
    pub fn new(model_id: &str, prompt: String, params: GenParams, repeat_index: u32) -> Self {
        ChatRequest {
            model_id: model_id.to_owned(),
            prompt,
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
            repeat_index,
        }
    }

    fn cache_key(&self) -> CacheKey {
        CacheKey::new(
            "chat",
            &self.model_id,
            &self.prompt,
            (self.temperature, self.top_p, self.max_tokens),
            self.repeat_index,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// What the sidecar advertises on `/health`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub embedding_model: Option<String>,
}

/// Raw endpoint access. Implementations do no caching or retrying.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError>;

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;

    fn nli(&self, _premise: &str, _hypothesis: &str) -> Result<String, ProviderError> {
        Err(ProviderError::MissingEndpoint("nli".into()))
    }

    fn score(&self, _scorer: &str, _candidates: &[String], _references: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Err(ProviderError::MissingEndpoint("pair-scoring".into()))
    }

    fn health(&self) -> Result<Option<Health>, ProviderError> {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Retry transient failures with exponential backoff.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if !e.is_transient() => return Err(e),
                Err(e) if attempt >= self.max_attempts => {
                    return Err(ProviderError::RetriesExhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => {
                    let delay = self.base_delay * 2u32.pow(attempt - 1);
                    log::debug!("attempt {attempt} failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}

/// Cached, retrying front end over a [`Backend`].
pub struct Provider {
    backend: Arc<dyn Backend>,
    cache: Option<DiskCache>,
    retry: RetryPolicy,
    nli_backend: NliBackend,
    judge_model_id: String,
    judge_params: GenParams,
    score_fixture: Option<ScoreFixture>,
    pool: rayon::ThreadPool,
}

impl Provider {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Provider {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            nli_backend: NliBackend::Chat,
            judge_model_id: "judge".into(),
            judge_params: GenParams::JUDGE,
            score_fixture: None,
            pool: build_pool(8),
        }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_nli_backend(mut self, backend: NliBackend) -> Self {
        self.nli_backend = backend;
        self
    }

    pub fn with_judge(mut self, model_id: &str, params: GenParams) -> Self {
        self.judge_model_id = model_id.to_owned();
        self.judge_params = params;
        self
    }

    pub fn with_score_fixture(mut self, fixture: ScoreFixture) -> Self {
        self.score_fixture = Some(fixture);
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.pool = build_pool(n);
        self
    }

    /// Build the provider a run configuration asks for.
    pub fn from_config(cfg: &RunConfig) -> Result<Self, Error> {
        let p = &cfg.provider;
        let backend: Arc<dyn Backend> = if p.mock {
            let mut m = MockBackend::new(cfg.seed, p.mock_embedding_dim);
            if let Some(path) = &p.mock_generations {
                m = m.with_canned_file(path)?;
            }
            Arc::new(m)
        } else {
            if p.api_base.is_none() && p.sidecar_base.is_none() {
                return Err(DataError::Config(
                    "no provider configured: set provider.api_base / provider.sidecar_base or use --mock".into(),
                )
                .into());
            }
            Arc::new(HttpBackend::new(
                p.api_base.clone(),
                p.sidecar_base.clone(),
                Duration::from_secs(p.timeout_secs),
            )?)
        };
        let mut provider = Provider::new(backend)
            .with_retry(RetryPolicy {
                max_attempts: p.max_attempts,
                base_delay: Duration::from_millis(p.retry_base_delay_ms),
            })
            .with_nli_backend(p.nli_backend)
            .with_judge(&cfg.judge_model_id, cfg.judge)
            .with_parallelism(cfg.parallelism);
        if let Some(dir) = &p.cache_dir {
            provider = provider.with_cache(DiskCache::new(dir));
        }
        if let Some(path) = &p.score_fixture {
            provider = provider.with_score_fixture(ScoreFixture::load(path)?);
        }
        Ok(provider)
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    /// Thread pool bounding the number of requests in flight.
    pub fn pool(&self) -> &rayon::ThreadPool {
        &self.pool
    }

    fn cached<T>(
        &self,
        key: &CacheKey,
        decode: impl Fn(&str) -> Option<T>,
        encode: impl Fn(&T) -> String,
        fetch: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(key).and_then(|s| decode(&s)) {
                return Ok(hit);
            }
        }
        let value = self.retry.run(fetch)?;
        if let Some(cache) = &self.cache {
            cache.put(key, &encode(&value))?;
        }
        Ok(value)
    }

    pub fn chat_complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        if !(req.temperature >= 0.0) || req.max_tokens < 1 {
            return Err(ProviderError::Precondition(format!(
                "invalid sampling parameters: temperature={}, max_tokens={}",
                req.temperature, req.max_tokens
            )));
        }
        self.cached(
            &req.cache_key(),
            |s| serde_json::from_str::<String>(s).ok(),
            |v| serde_json::to_string(v).expect("string serializes"),
            || self.backend.chat(req),
        )
    }

    /// One vector per input, in input order. Each text is cached separately.
    pub fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::Precondition("embed called with no texts".into()));
        }
        let keys: Vec<CacheKey> = texts
            .iter()
            .map(|t| CacheKey::new("embed", model_id, t, (), 0))
            .collect();
        let mut out: Vec<Option<Vec<f64>>> = keys
            .iter()
            .map(|k| {
                self.cache
                    .as_ref()
                    .and_then(|c| c.get(k))
                    .and_then(|s| serde_json::from_str(&s).ok())
            })
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fetched = self.retry.run(|| self.backend.embed(model_id, &batch))?;
            if fetched.len() != batch.len() {
                return Err(ProviderError::BadResponse {
                    endpoint: self.backend.name().to_owned(),
                    message: format!("{} vectors for {} texts", fetched.len(), batch.len()),
                });
            }
            for (&i, v) in missing.iter().zip(fetched) {
                if let Some(cache) = &self.cache {
                    cache.put(&keys[i], &serde_json::to_string(&v).expect("vector serializes"))?;
                }
                out[i] = Some(v);
            }
        }
        let vectors: Vec<EmbeddingVector> = out
            .into_iter()
            .map(|v| EmbeddingVector::new(v.expect("filled")))
            .collect();
        let dim = vectors[0].dim();
        for (v, t) in vectors.iter().zip(texts) {
            if v.dim() != dim || dim == 0 {
                return Err(ProviderError::DimMismatch {
                    expected: dim,
                    actual: v.dim(),
                    context: Some(format!("text {:?}", crate::text::truncate_chars(t, 40).0)),
                });
            }
            if !v.is_finite() {
                return Err(ProviderError::BadResponse {
                    endpoint: self.backend.name().to_owned(),
                    message: "non-finite embedding value".into(),
                });
            }
        }
        Ok(vectors)
    }

    /// Label a (gold evidence, generated sentence) pair. Unusable replies are
    /// re-asked once, then recorded as neutral with `parse_failed` set.
    pub fn nli_judge(&self, premise: &str, hypothesis: &str) -> Result<NliOutcome, ProviderError> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(ProviderError::Precondition("NLI premise and hypothesis must be nonempty".into()));
        }
        for attempt in 0..2u32 {
            let reply = match self.nli_backend {
                NliBackend::Chat => {
                    let req = ChatRequest::new(
                        &self.judge_model_id,
                        render_nli_prompt(premise, hypothesis),
                        self.judge_params,
                        attempt,
                    );
                    self.chat_complete(&req)?
                }
                NliBackend::Sidecar => {
                    let key = CacheKey::new("nli", "sidecar", &format!("{premise}\u{0}{hypothesis}"), (), attempt);
                    self.cached(
                        &key,
                        |s| serde_json::from_str::<String>(s).ok(),
                        |v| serde_json::to_string(v).expect("string serializes"),
                        || self.backend.nli(premise, hypothesis),
                    )?
                }
            };
            if let Some(label) = parse_nli_label(&reply) {
                return Ok(NliOutcome {
                    label,
                    parse_failed: false,
                });
            }
            log::debug!("unparseable NLI reply {reply:?} (attempt {})", attempt + 1);
        }
        Ok(NliOutcome {
            label: NliLabel::Neutral,
            parse_failed: true,
        })
    }

    /// |candidates| × |references| scores in [0, 1].
    pub fn score_pairs(&self, candidates: &[String], references: &[String], scorer: &str) -> Result<Vec<Vec<f64>>, ProviderError> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        if references.is_empty() {
            return Ok(vec![Vec::new(); candidates.len()]);
        }
        let matrix = match &self.score_fixture {
            Some(f) => f.lookup(candidates, references)?,
            None => {
                let input = serde_json::to_string(&(candidates, references)).expect("serializes");
                let key = CacheKey::new("score", scorer, &input, (), 0);
                self.cached(
                    &key,
                    |s| serde_json::from_str::<Vec<Vec<f64>>>(s).ok(),
                    |v| serde_json::to_string(v).expect("matrix serializes"),
                    || self.backend.score(scorer, candidates, references),
                )?
            }
        };
        if matrix.len() != candidates.len() || matrix.iter().any(|r| r.len() != references.len()) {
            return Err(ProviderError::BadResponse {
                endpoint: self.backend.name().to_owned(),
                message: "score matrix shape does not match inputs".into(),
            });
        }
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ProviderError::BadResponse {
                endpoint: self.backend.name().to_owned(),
                message: "non-finite score".into(),
            });
        }
        Ok(matrix
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
            .collect())
    }

    pub fn health(&self) -> Result<Option<Health>, ProviderError> {
        self.retry.run(|| self.backend.health())
    }
}

fn build_pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .thread_name(|i| format!("qeleak-req-{i}"))
        .build()
        .expect("thread pool")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Returns scripted chat replies in order and counts calls.
    struct Scripted {
        replies: Mutex<Vec<String>>,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Arc<Self> {
            Arc::new(Scripted {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                calls: Default::default(),
            })
        }
    }

    impl Backend for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }
        fn chat(&self, _req: &ChatRequest) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(self.replies.lock().unwrap().pop().unwrap_or_default())
        }
        fn embed(&self, _m: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
            Ok(texts.iter().map(|t| vec![1.0; t.len().max(1)]).collect())
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(1) }
    }

    fn req(prompt: &str, repeat: u32) -> ChatRequest {
        ChatRequest::new("m", prompt.into(), GenParams::EXPANSION, repeat)
    }

    #[test]
    fn second_identical_request_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(MockBackend::new(3, 8));
        let p = Provider::new(mock.clone()).with_cache(DiskCache::new(dir.path()));
        let a = p.chat_complete(&req("p", 0)).unwrap();
        let b = p.chat_complete(&req("p", 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(mock.calls(), 1);
        p.chat_complete(&req("p", 1)).unwrap();
        assert_eq!(mock.calls(), 2, "repeat index is part of the key");
    }

    #[test]
    fn transient_failures_are_retried_then_exhausted() {
        let mock = Arc::new(MockBackend::new(0, 8).with_transient_failures(2));
        let p = Provider::new(mock.clone()).with_retry(fast());
        assert!(p.chat_complete(&req("p", 0)).is_ok());
        assert_eq!(mock.calls(), 3);

        let mock = Arc::new(MockBackend::new(0, 8).with_transient_failures(5));
        let p = Provider::new(mock.clone()).with_retry(fast());
        match p.chat_complete(&req("p", 0)) {
            Err(ProviderError::RetriesExhausted { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_sampling_parameters_are_rejected() {
        let p = Provider::new(Arc::new(MockBackend::new(0, 8)));
        let mut r = req("p", 0);
        r.temperature = -1.0;
        assert!(matches!(p.chat_complete(&r), Err(ProviderError::Precondition(_))));
    }

    #[test]
    fn embed_contract() {
        let p = Provider::new(Arc::new(MockBackend::new(0, 8)));
        assert!(matches!(p.embed("m", &[]), Err(ProviderError::Precondition(_))));
        let v = p.embed("m", &["a".into(), "a".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[0].dim(), 8);
    }

    #[test]
    fn embed_rejects_mixed_dimensions() {
        let p = Provider::new(Scripted::new(&[]));
        assert!(matches!(
            p.embed("m", &["ab".into(), "abc".into()]),
            Err(ProviderError::DimMismatch { expected: 2, actual: 3, .. })
        ));
    }

    #[test]
    fn nli_reasks_once_then_flags() {
        let s = Scripted::new(&["Entailment"]);
        let out = Provider::new(s.clone()).nli_judge("p", "h").unwrap();
        assert_eq!(out, NliOutcome { label: NliLabel::Entailment, parse_failed: false });

        let s = Scripted::new(&["I think it follows", " neutral\n"]);
        let out = Provider::new(s.clone()).nli_judge("p", "h").unwrap();
        assert_eq!(out, NliOutcome { label: NliLabel::Neutral, parse_failed: false });
        assert_eq!(s.calls.load(std::sync::atomic::Ordering::SeqCst), 2);

        let s = Scripted::new(&["I think it follows", "I think it follows"]);
        let out = Provider::new(s.clone()).nli_judge("p", "h").unwrap();
        assert_eq!(out, NliOutcome { label: NliLabel::Neutral, parse_failed: true });
        assert_eq!(s.calls.load(std::sync::atomic::Ordering::SeqCst), 2);
    }

    #[test]
    fn nli_requires_nonempty_inputs() {
        let p = Provider::new(Scripted::new(&[]));
        assert!(p.nli_judge("", "x").is_err());
    }

    #[test]
    fn score_pairs_shapes_and_self_similarity() {
        let p = Provider::new(Arc::new(MockBackend::new(0, 8)));
        let texts: Vec<String> = ["the cat sat on the mat", "stock markets fell sharply", "rain is expected tomorrow"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let m = p.score_pairs(&texts, &texts, "bertscore").unwrap();
        for (i, row) in m.iter().enumerate() {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(row[i], max);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(p.score_pairs(&[], &texts, "bertscore").unwrap().is_empty());
    }

    #[test]
    fn missing_scoring_endpoint_is_reported() {
        let p = Provider::new(Scripted::new(&[]));
        let err = p.score_pairs(&["a".into()], &["b".into()], "bertscore").unwrap_err();
        assert!(matches!(err, ProviderError::MissingEndpoint(_)));
        assert!(err.to_string().contains("METEOR"));
    }

    #[test]
    fn score_fixture_reload_is_bit_identical() {
        let cands: Vec<String> = vec!["x y".into(), "z".into()];
        let refs: Vec<String> = vec!["y".into(), "q r".into(), "x".into()];
        let matrix = vec![vec![0.1, 0.2 + 1e-17, 1.0 / 3.0], vec![0.0, 0.987654321, 0.5]];
        let mut fx = ScoreFixture::new("bertscore");
        fx.record(&cands, &refs, &matrix);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.json");
        fx.save(&path).unwrap();
        let p = Provider::new(Scripted::new(&[])).with_score_fixture(ScoreFixture::load(&path).unwrap());
        let back = p.score_pairs(&cands, &refs, "bertscore").unwrap();
        for (a, b) in back.iter().flatten().zip(matrix.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(p.score_pairs(&["unknown".into()], &refs, "bertscore").is_err());
    }
}
