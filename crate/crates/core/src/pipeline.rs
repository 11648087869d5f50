//! Resumable stage runner over a run directory.
//!
//! Every stage reads the flat files written by earlier stages and writes its
//! own. `manifest.json` records which stages completed under which config
//! digest; `.lock` keeps a second process out.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{build_report, render_text, report_json, Flags, ReportHeader, ReportInput, SystemScores};
use crate::config::{Method, RunConfig};
use crate::dense::{build_vector_index, claim_search, hyde_search, VectorIndex};
use crate::error::{DataError, Error, ProviderError};
use crate::expansion::{expand_query2doc, generate_all, GenerationRecord, EMPTY_GENERATION};
use crate::lexical::{read_json, InvertedIndex};
use crate::matching::{build_sentence_set, match_document, matched_rate, resolve_evidence_texts, MatchRecord, MatchedRate};
use crate::metrics::{evidence_text_score, ndcg_at_k, recall_at_k};
use crate::model::{
    dominant_mode, drop_unresolved, load_claims, load_corpus, read_jsonl, validate_references, write_atomic,
    write_claims, write_jsonl, Claim, Corpus, EvalMode, Evidence,
};
use crate::providers::{DiskCache, Provider};
use crate::ranking::{Ranking, RankingRecord, System};
use crate::verdict::{verdict_run, VerdictJob, VerdictRecord, VerdictSettings};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Index,
    Expand,
    Retrieve,
    Match,
    Verdict,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Index,
        Stage::Expand,
        Stage::Retrieve,
        Stage::Match,
        Stage::Verdict,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Index => "index",
            Stage::Expand => "expand",
            Stage::Retrieve => "retrieve",
            Stage::Match => "match",
            Stage::Verdict => "verdict",
            Stage::Report => "report",
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        let i = Stage::ALL.iter().position(|&s| s == self).expect("listed");
        &Stage::ALL[..i]
    }

    fn later(self) -> impl Iterator<Item = Stage> {
        Stage::ALL.into_iter().filter(move |&s| s > self)
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub completed: bool,
    /// Files written by the stage, relative to the run directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config_digest: String,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageState>,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        RunManifest {
            run_id: format!("run-{now}-{}", std::process::id()),
            tool_version: TOOL_VERSION.to_owned(),
            config_digest: config.digest(),
            config: config.clone(),
            stages: BTreeMap::new(),
        }
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.get(stage.name()).is_some_and(|s| s.completed)
    }

    pub fn missing_prerequisites(&self, stage: Stage) -> Vec<String> {
        stage
            .prerequisites()
            .iter()
            .filter(|s| !self.is_complete(**s))
            .map(|s| s.name().to_owned())
            .collect()
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>, DataError> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), DataError> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| DataError::Invalid(e.to_string()))?;
        write_atomic(&run_dir.join(MANIFEST_FILE), &bytes)
    }
}

/// Exclusive ownership of a run directory for the guard's lifetime.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, Error> {
        std::fs::create_dir_all(run_dir).map_err(|e| DataError::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_owned())),
            Err(e) => Err(DataError::io(path, e).into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Already complete under the same configuration.
    Skipped,
}

/// Summary written by `ingest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub mode: EvalMode,
    pub claims: usize,
    pub documents: usize,
    pub claims_skipped_no_evidence: usize,
    pub claims_dropped_unresolved: usize,
    pub documents_skipped_empty: usize,
}

/// Per-claim metric values of one ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub claim_id: String,
    pub system: System,
    pub repeat_index: u32,
    pub metrics: BTreeMap<String, f64>,
}

mod files {
    pub const CLAIMS: &str = "claims.jsonl";
    pub const INGEST: &str = "ingest.json";
    pub const BM25_INDEX: &str = "index/bm25";
    pub const DENSE_INDEX: &str = "index/dense";
    pub const GENERATIONS: &str = "generations.jsonl";
    pub const RANKINGS: &str = "rankings.jsonl";
    pub const SCORES: &str = "scores.jsonl";
    pub const MATCHES: &str = "matches.jsonl";
    pub const MATCH_SUMMARY: &str = "match_summary.json";
    pub const VERDICTS: &str = "verdicts.jsonl";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
}

pub struct Pipeline {
    run_dir: PathBuf,
    config: RunConfig,
    manifest: RunManifest,
    force: bool,
    provider: Option<Provider>,
    _lock: RunLock,
}

impl Pipeline {
    /// Lock `run_dir` and load its manifest, or start a fresh one.
    pub fn open(run_dir: &Path, config: RunConfig, force: bool) -> Result<Self, Error> {
        config.validate()?;
        let lock = RunLock::acquire(run_dir)?;
        let manifest = match RunManifest::load(run_dir)? {
            Some(m) => m,
            None => {
                let m = RunManifest::new(&config);
                m.save(run_dir)?;
                m
            }
        };
        Ok(Pipeline {
            run_dir: run_dir.to_owned(),
            config,
            manifest,
            force,
            provider: None,
            _lock: lock,
        })
    }

    /// Use this provider instead of building one from the config.
    pub fn with_provider(mut self, provider: Provider) -> Self {
        self.provider = Some(provider);
        self
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn provider(&mut self) -> Result<&Provider, Error> {
        if self.provider.is_none() {
            let mut cfg = self.config.clone();
            if cfg.provider.cache_dir.is_none() {
                cfg.provider.cache_dir = Some(self.run_dir.join("cache"));
            }
            let p = Provider::from_config(&cfg)?;
            let p = match &cfg.provider.cache_dir {
                Some(dir) => p.with_cache(DiskCache::new(dir)),
                None => p,
            };
            self.provider = Some(p);
        }
        Ok(self.provider.as_ref().expect("just set"))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    /// Run one stage, honoring prerequisites, drift detection and idempotence.
    pub fn run(&mut self, stage: Stage) -> Result<StageOutcome, Error> {
        let digest = self.config.digest();
        let drifted = digest != self.manifest.config_digest;
        if drifted && !self.force {
            return Err(Error::ConfigDrift);
        }
        if drifted {
            log::warn!("configuration changed; adopting it and invalidating `{}` onwards", stage.name());
            self.manifest.config_digest = digest;
            self.manifest.config = self.config.clone();
            self.manifest.stages.remove(stage.name());
            for s in stage.later() {
                self.manifest.stages.remove(s.name());
            }
            self.manifest.save(&self.run_dir)?;
        }
        let missing = self.manifest.missing_prerequisites(stage);
        if !missing.is_empty() {
            return Err(Error::MissingPrerequisites {
                stage: stage.name().to_owned(),
                missing,
            });
        }
        if self.manifest.is_complete(stage) && !self.force {
            log::info!("stage `{}` already complete, skipping", stage.name());
            return Ok(StageOutcome::Skipped);
        }
        // Anything downstream is stale once this stage reruns.
        self.manifest.stages.remove(stage.name());
        for s in stage.later() {
            self.manifest.stages.remove(s.name());
        }
        self.manifest.save(&self.run_dir)?;

        log::info!("running stage `{}`", stage.name());
        let result = match stage {
            Stage::Ingest => self.ingest(),
            Stage::Index => self.index(),
            Stage::Expand => self.expand(),
            Stage::Retrieve => self.retrieve(),
            Stage::Match => self.match_stage(),
            Stage::Verdict => self.verdict(),
            Stage::Report => self.report(),
        };
        let (outputs, failure) = match result {
            Ok(outputs) => (outputs, None),
            Err(StageError { outputs, error }) => (outputs, Some(error)),
        };
        self.manifest.stages.insert(
            stage.name().to_owned(),
            StageState {
                completed: failure.is_none(),
                outputs,
            },
        );
        self.manifest.save(&self.run_dir)?;
        match failure {
            None => Ok(StageOutcome::Ran),
            Some(e) => Err(e),
        }
    }

    /// Run every stage in order.
    pub fn run_all(&mut self) -> Result<Vec<(Stage, StageOutcome)>, Error> {
        Stage::ALL.into_iter().map(|s| self.run(s).map(|o| (s, o))).collect()
    }

    fn load_claims_file(&self) -> Result<Vec<Claim>, DataError> {
        read_jsonl(&self.path(files::CLAIMS))
    }

    fn ingest_summary(&self) -> Result<IngestSummary, DataError> {
        read_json(&self.path(files::INGEST))
    }

    fn ingest(&mut self) -> StageResult {
        let cfg = &self.config;
        let labels = cfg.dataset.label_set();
        let set = load_claims(&cfg.claims_path, &labels)?;
        let corpus = load_corpus(&cfg.corpus_path)?;
        let mut claims = set.claims;
        let mode = dominant_mode(&claims);
        let mut skipped = set.skipped_no_evidence;

        // Gold evidence of the other kind cannot be scored in this mode.
        let before = claims.len();
        claims.retain(|c| {
            c.evidence.iter().any(|e| match (mode, e) {
                (EvalMode::DocumentIds, Evidence::CorpusRef { .. }) => true,
                (EvalMode::FreeText, Evidence::FreeText { .. }) => true,
                _ => false,
            })
        });
        skipped += before - claims.len();

        let mut dropped = 0;
        if mode == EvalMode::DocumentIds {
            for (claim, doc) in validate_references(&claims, &corpus) {
                log::warn!("claim {claim}: evidence document {doc} is not in the corpus");
            }
            dropped = drop_unresolved(&mut claims, &corpus);
            claims.retain(|c| c.corpus_refs().next().is_some());
        }
        if claims.is_empty() {
            return Err(DataError::Invalid("no claims left to evaluate after filtering".into()).into());
        }
        claims.sort_by(|a, b| a.id.cmp(&b.id));
        let summary = IngestSummary {
            mode,
            claims: claims.len(),
            documents: corpus.len(),
            claims_skipped_no_evidence: skipped,
            claims_dropped_unresolved: dropped,
            documents_skipped_empty: corpus.skipped_empty,
        };
        write_claims(&self.path(files::CLAIMS), &claims)?;
        let bytes = serde_json::to_vec_pretty(&summary).map_err(|e| DataError::Invalid(e.to_string()))?;
        write_atomic(&self.path(files::INGEST), &bytes)?;
        log::info!(
            "ingested {} claims ({} skipped, {} dropped) over {} documents, mode {:?}",
            summary.claims,
            skipped,
            dropped,
            summary.documents,
            mode
        );
        Ok(vec![files::CLAIMS.into(), files::INGEST.into()])
    }

    fn index(&mut self) -> StageResult {
        let corpus = load_corpus(&self.config.corpus_path)?;
        match self.config.method {
            Method::Query2doc => {
                let index = InvertedIndex::build(&corpus, self.config.bm25, self.config.analyzer)?;
                index.save(&self.path(files::BM25_INDEX))?;
                Ok(vec![files::BM25_INDEX.into()])
            }
            Method::Hyde => {
                let model = self.config.embedding_model_id.clone();
                let batch = self.config.embed_batch_size;
                let provider = self.provider()?;
                let index = build_vector_index(&corpus, provider, &model, batch)?;
                index.save(&self.path(files::DENSE_INDEX))?;
                Ok(vec![files::DENSE_INDEX.into()])
            }
        }
    }

    fn expand(&mut self) -> StageResult {
        let claims = self.load_claims_file()?;
        let cfg = self.config.clone();
        let records = generate_all(&claims, &cfg, self.provider()?);
        write_jsonl(&self.path(files::GENERATIONS), &records)?;
        let outputs = vec![files::GENERATIONS.to_owned()];
        let hard: Vec<&GenerationRecord> = records
            .iter()
            .filter(|r| r.generation_failed && r.error.as_deref() != Some(EMPTY_GENERATION))
            .collect();
        if let Some(first) = hard.first() {
            let message = format!(
                "{} of {} generations failed (first: claim {} repeat {}: {})",
                hard.len(),
                records.len(),
                first.claim_id,
                first.repeat_index,
                first.error.as_deref().unwrap_or("unknown error")
            );
            return Err(StageError::partial(outputs, ProviderError::Precondition(message).into()));
        }
        Ok(outputs)
    }

    fn generations_by_claim(&self) -> Result<HashMap<(String, u32), Vec<GenerationRecord>>, DataError> {
        let mut out: HashMap<(String, u32), Vec<GenerationRecord>> = HashMap::new();
        for r in read_jsonl::<GenerationRecord>(&self.path(files::GENERATIONS))? {
            out.entry((r.claim_id.clone(), r.repeat_index)).or_default().push(r);
        }
        for v in out.values_mut() {
            v.sort_by_key(|r| r.sample_index);
        }
        Ok(out)
    }

    fn retrieve(&mut self) -> StageResult {
        use rayon::prelude::*;

        let claims = self.load_claims_file()?;
        let summary = self.ingest_summary()?;
        let corpus = load_corpus(&self.config.corpus_path)?;
        let gens = self.generations_by_claim()?;
        let cfg = self.config.clone();
        let retriever = match cfg.method {
            Method::Query2doc => Retriever::Lexical(InvertedIndex::load(&self.path(files::BM25_INDEX))?),
            Method::Hyde => Retriever::Dense(VectorIndex::load(&self.path(files::DENSE_INDEX))?),
        };
        let provider = self.provider()?;

        let mut jobs: Vec<(&Claim, System, u32)> = Vec::new();
        for c in &claims {
            jobs.push((c, System::Baseline, 0));
            for r in 0..cfg.repeats as u32 {
                jobs.push((c, System::Expanded, r));
            }
        }
        let results: Vec<Result<(RankingRecord, ScoreRecord), Error>> = provider.pool().install(|| {
            jobs.par_iter()
                .map(|&(claim, system, repeat)| {
                    let texts: Vec<&str> = match system {
                        System::Baseline => Vec::new(),
                        System::Expanded => gens
                            .get(&(claim.id.clone(), repeat))
                            .map(|v| v.iter().filter(|g| !g.text.trim().is_empty()).map(|g| g.text.as_str()).collect())
                            .unwrap_or_default(),
                    };
                    let hits = retriever.search(claim, system, &texts, &cfg, provider)?;
                    let metrics = score_ranking(claim, &hits, summary.mode, &corpus, &cfg, provider)?;
                    Ok((
                        RankingRecord {
                            claim_id: claim.id.clone(),
                            system,
                            repeat_index: repeat,
                            hits,
                        },
                        ScoreRecord {
                            claim_id: claim.id.clone(),
                            system,
                            repeat_index: repeat,
                            metrics,
                        },
                    ))
                })
                .collect()
        });
        let mut rankings = Vec::with_capacity(results.len());
        let mut scores = Vec::with_capacity(results.len());
        for r in results {
            let (rank, score) = r?;
            rankings.push(rank);
            scores.push(score);
        }
        write_jsonl(&self.path(files::RANKINGS), &rankings)?;
        write_jsonl(&self.path(files::SCORES), &scores)?;
        Ok(vec![files::RANKINGS.into(), files::SCORES.into()])
    }

    fn match_stage(&mut self) -> StageResult {
        use rayon::prelude::*;

        let claims = self.load_claims_file()?;
        let corpus = load_corpus(&self.config.corpus_path)?;
        let gens = self.generations_by_claim()?;
        let cfg = self.config.clone();
        let provider = self.provider()?;

        let jobs: Vec<(&Claim, u32)> = claims
            .iter()
            .flat_map(|c| (0..cfg.repeats as u32).map(move |r| (c, r)))
            .collect();
        let results: Vec<Result<MatchRecord, DataError>> = provider.pool().install(|| {
            jobs.par_iter()
                .map(|&(claim, repeat)| {
                    let texts: Vec<&str> = gens
                        .get(&(claim.id.clone(), repeat))
                        .map(|v| v.iter().map(|g| g.text.as_str()).collect())
                        .unwrap_or_default();
                    let set = build_sentence_set(claim, repeat, &texts, cfg.rouge_threshold, cfg.rouge_variant);
                    let evidence = resolve_evidence_texts(claim, &corpus, cfg.premise_max_chars)?;
                    match_document(&evidence, &set, provider, cfg.exhaustive)
                })
                .collect()
        });
        let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        write_jsonl(&self.path(files::MATCHES), &records)?;
        let mut outputs = vec![files::MATCHES.to_owned()];
        if let Some(failed) = records.iter().find(|r| r.error.is_some()) {
            let n = records.iter().filter(|r| r.error.is_some()).count();
            let message = format!(
                "NLI failed for {n} claim/repeat pairs (first: claim {} repeat {}: {})",
                failed.claim_id,
                failed.repeat_index,
                failed.error.as_deref().unwrap_or_default()
            );
            return Err(StageError::partial(outputs, ProviderError::Precondition(message).into()));
        }
        let rate = matched_rate(&records)?;
        let bytes = serde_json::to_vec_pretty(&rate).map_err(|e| DataError::Invalid(e.to_string()))?;
        write_atomic(&self.path(files::MATCH_SUMMARY), &bytes)?;
        outputs.push(files::MATCH_SUMMARY.into());
        Ok(outputs)
    }

    fn verdict(&mut self) -> StageResult {
        let claims = self.load_claims_file()?;
        let corpus = load_corpus(&self.config.corpus_path)?;
        let rankings: Vec<RankingRecord> = read_jsonl(&self.path(files::RANKINGS))?;
        let cfg = self.config.clone();
        let labels = cfg.dataset.label_set();
        let settings = VerdictSettings {
            judge_model_id: cfg.judge_model_id.clone(),
            params: cfg.judge,
            fallback_label: cfg.fallback_label(),
            evidence_max_chars: cfg.evidence_max_chars,
            k: cfg.k,
        };
        let by_id: HashMap<&str, &Claim> = claims.iter().map(|c| (c.id.as_str(), c)).collect();
        let mut jobs = Vec::with_capacity(rankings.len());
        for r in &rankings {
            let claim = by_id
                .get(r.claim_id.as_str())
                .ok_or_else(|| DataError::Invalid(format!("ranking for unknown claim {}", r.claim_id)))?;
            let evidence = r
                .hits
                .iter()
                .take(cfg.k)
                .filter_map(|h| corpus.get(&h.doc_id).map(|d| d.titled_text()))
                .collect();
            jobs.push(VerdictJob {
                claim_id: &claim.id,
                claim_text: &claim.text,
                system: r.system,
                repeat_index: r.repeat_index,
                evidence,
            });
        }
        let outcome = verdict_run(jobs, &labels, self.provider()?, &settings);
        let (records, failure) = outcome?;
        write_jsonl(&self.path(files::VERDICTS), &records)?;
        let outputs = vec![files::VERDICTS.to_owned()];
        match failure {
            Some(e) => Err(StageError::partial(outputs, e.into())),
            None => Ok(outputs),
        }
    }

    fn report(&mut self) -> StageResult {
        let claims = self.load_claims_file()?;
        let summary = self.ingest_summary()?;
        let cfg = &self.config;
        let scores: Vec<ScoreRecord> = read_jsonl(&self.path(files::SCORES))?;
        let verdicts: Vec<VerdictRecord> = read_jsonl(&self.path(files::VERDICTS))?;
        let matches: Vec<MatchRecord> = read_jsonl(&self.path(files::MATCHES))?;
        let gens: Vec<GenerationRecord> = read_jsonl(&self.path(files::GENERATIONS))?;
        let rate: MatchedRate = read_json(&self.path(files::MATCH_SUMMARY))?;

        let metrics = metric_names(summary.mode, cfg);
        let mut baseline = SystemScores::default();
        let mut expanded = vec![SystemScores::default(); cfg.repeats];
        for s in &scores {
            let dst = match s.system {
                System::Baseline => &mut baseline,
                System::Expanded => expanded
                    .get_mut(s.repeat_index as usize)
                    .ok_or_else(|| DataError::Invalid(format!("score for repeat {} beyond {}", s.repeat_index, cfg.repeats)))?,
            };
            for (m, v) in &s.metrics {
                dst.per_claim.entry(m.clone()).or_default().insert(s.claim_id.clone(), *v);
            }
        }
        for v in &verdicts {
            let dst = match v.system {
                System::Baseline => &mut baseline,
                System::Expanded => expanded
                    .get_mut(v.repeat_index as usize)
                    .ok_or_else(|| DataError::Invalid(format!("verdict for repeat {} beyond {}", v.repeat_index, cfg.repeats)))?,
            };
            dst.predictions.insert(v.claim_id.clone(), v.predicted.clone());
        }

        let flags = Flags {
            claims_evaluated: claims.len(),
            claims_skipped_no_evidence: summary.claims_skipped_no_evidence,
            claims_dropped_unresolved: summary.claims_dropped_unresolved,
            generation_failures: gens.iter().filter(|g| g.generation_failed).count(),
            empty_sentence_sets: matches.iter().filter(|m| m.empty_sentence_set).count(),
            nli_judgments: matches.iter().map(|m| m.judgments.len()).sum(),
            nli_parse_failures: matches.iter().map(|m| m.parse_failures()).sum(),
            verdict_parse_failures: verdicts.iter().filter(|v| v.parse_failed).count(),
            verdicts_without_evidence: verdicts.iter().filter(|v| v.no_evidence).count(),
        };
        let input = ReportInput {
            header: ReportHeader {
                dataset: cfg.dataset.name().to_owned(),
                evaluation: match summary.mode {
                    EvalMode::DocumentIds => "document ids".into(),
                    EvalMode::FreeText => "free text".into(),
                },
                method: cfg.method.name().to_owned(),
                baseline: cfg.method.baseline_name().to_owned(),
                model_id: cfg.model_id.clone(),
                k: cfg.k,
                repeats: cfg.repeats,
                significance_unit: cfg.significance_unit,
            },
            metrics,
            labels: cfg.dataset.label_set().labels().to_vec(),
            gold: claims.iter().map(|c| (c.id.clone(), c.label.clone())).collect(),
            baseline,
            expanded,
            matches,
            matched_rate: rate,
            flags,
        };
        let report = build_report(&input)?;
        write_atomic(&self.path(files::REPORT_JSON), report_json(&report).as_bytes())?;
        write_atomic(&self.path(files::REPORT_TXT), render_text(&report).as_bytes())?;
        Ok(vec![files::REPORT_JSON.into(), files::REPORT_TXT.into()])
    }
}

struct StageError {
    outputs: Vec<String>,
    error: Error,
}

impl StageError {
    fn partial(outputs: Vec<String>, error: Error) -> Self {
        StageError { outputs, error }
    }
}

impl<E: Into<Error>> From<E> for StageError {
    fn from(e: E) -> Self {
        StageError {
            outputs: Vec::new(),
            error: e.into(),
        }
    }
}

type StageResult = Result<Vec<String>, StageError>;

enum Retriever {
    Lexical(InvertedIndex),
    Dense(VectorIndex),
}

impl Retriever {
    fn search(&self, claim: &Claim, system: System, pseudo_docs: &[&str], cfg: &RunConfig, provider: &Provider) -> Result<Ranking, Error> {
        match self {
            Retriever::Lexical(index) => {
                let query = match (system, pseudo_docs.first()) {
                    (System::Expanded, Some(doc)) => expand_query2doc(&claim.text, doc, cfg.query_copies)?,
                    _ => claim.text.clone(),
                };
                Ok(index.search(&query, cfg.k))
            }
            Retriever::Dense(index) => {
                let model = &cfg.embedding_model_id;
                if system == System::Baseline || pseudo_docs.is_empty() {
                    return claim_search(&claim.text, index, provider, model, cfg.k);
                }
                let n = cfg.hyde_docs.min(pseudo_docs.len());
                hyde_search(&claim.id, &claim.text, pseudo_docs, index, provider, model, cfg.k, n)
            }
        }
    }
}

/// Column names of the per-claim retrieval metrics for a mode.
pub fn metric_names(mode: EvalMode, cfg: &RunConfig) -> Vec<String> {
    match mode {
        EvalMode::DocumentIds => vec![format!("Recall@{}", cfg.k), format!("NDCG@{}", cfg.k)],
        EvalMode::FreeText => {
            let set: BTreeSet<_> = cfg.scorers.iter().copied().collect();
            set.into_iter().map(|s| s.display_name().to_owned()).collect()
        }
    }
}

fn score_ranking(claim: &Claim, hits: &Ranking, mode: EvalMode, corpus: &Corpus, cfg: &RunConfig, provider: &Provider) -> Result<BTreeMap<String, f64>, Error> {
    let names = metric_names(mode, cfg);
    let mut out = BTreeMap::new();
    match mode {
        EvalMode::DocumentIds => {
            let relevant: BTreeSet<String> = claim.corpus_refs().map(str::to_owned).collect();
            out.insert(names[0].clone(), recall_at_k(hits, &relevant, cfg.k)?);
            out.insert(names[1].clone(), ndcg_at_k(hits, &relevant, cfg.k)?);
        }
        EvalMode::FreeText => {
            let retrieved: Vec<String> = hits
                .iter()
                .filter_map(|h| corpus.get(&h.doc_id).map(|d| d.text.clone()))
                .collect();
            let gold: Vec<String> = claim
                .evidence
                .iter()
                .filter_map(|e| match e {
                    Evidence::FreeText { text } => Some(text.clone()),
                    Evidence::CorpusRef { .. } => None,
                })
                .collect();
            let set: BTreeSet<_> = cfg.scorers.iter().copied().collect();
            for scorer in set {
                let v = evidence_text_score(&retrieved, &gold, scorer, Some(provider))?;
                out.insert(scorer.display_name().to_owned(), v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Document;
    use crate::providers::MockBackend;
    use std::sync::Arc;

    fn write_fixture(dir: &Path) -> RunConfig {
        let claims = [
            r#"{"id":"c1","claim":"The red fox jumps over fences.","label":"SUPPORTS","evidence":[{"doc_id":"d1"}]}"#,
            r#"{"id":"c2","claim":"Paris hosts the old opera house.","label":"REFUTES","evidence":[{"doc_id":"d2"},{"doc_id":"zz"}]}"#,
            r#"{"id":"c3","claim":"Nothing supports this one.","label":"SUPPORTS","evidence":[]}"#,
        ];
        std::fs::write(dir.join("claims.jsonl"), claims.join("\n")).unwrap();
        let docs = [
            Document { doc_id: "d1".into(), title: Some("Fox".into()), text: "The red fox jumps over fences. Foxes are quick.".into() },
            Document { doc_id: "d2".into(), title: Some("Opera".into()), text: "Paris hosts the old opera house. It opened in 1875.".into() },
            Document { doc_id: "d3".into(), title: None, text: "Rivers flow into the sea.".into() },
        ];
        write_jsonl(&dir.join("corpus.jsonl"), &docs).unwrap();
        let mut cfg = RunConfig::default();
        cfg.claims_path = dir.join("claims.jsonl");
        cfg.corpus_path = dir.join("corpus.jsonl");
        cfg.repeats = 2;
        cfg.k = 2;
        cfg.parallelism = 2;
        cfg.provider.mock = true;
        cfg
    }

    fn mock_provider(cfg: &RunConfig) -> (Arc<MockBackend>, Provider) {
        let backend = Arc::new(
            MockBackend::new(cfg.seed, 8)
                .with_canned("The red fox jumps over fences.", vec!["Foxes are quick. Wolves howl loudly.".into()]),
        );
        let provider = Provider::new(backend.clone()).with_parallelism(2);
        (backend, provider)
    }

    #[test]
    fn stage_names_roundtrip_and_order() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!(Stage::Report.prerequisites().contains(&Stage::Match));
        assert!(Stage::Ingest.prerequisites().is_empty());
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn fresh_ingest_records_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_fixture(tmp.path());
        let run = tmp.path().join("run");
        let mut p = Pipeline::open(&run, cfg, false).unwrap();
        assert_eq!(p.run(Stage::Ingest).unwrap(), StageOutcome::Ran);
        let st = &p.manifest().stages["ingest"];
        assert!(st.completed);
        assert!(st.outputs.contains(&"claims.jsonl".to_owned()));
        let summary: IngestSummary = read_json(&run.join("ingest.json")).unwrap();
        assert_eq!(summary.claims, 2);
        assert_eq!(summary.claims_skipped_no_evidence, 1);
        assert_eq!(summary.claims_dropped_unresolved, 0);
        let on_disk = RunManifest::load(&run).unwrap().unwrap();
        assert!(on_disk.is_complete(Stage::Ingest));
    }

    #[test]
    fn out_of_order_stage_lists_missing() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_fixture(tmp.path());
        let mut p = Pipeline::open(&tmp.path().join("run"), cfg, false).unwrap();
        p.run(Stage::Ingest).unwrap();
        match p.run(Stage::Report) {
            Err(Error::MissingPrerequisites { stage, missing }) => {
                assert_eq!(stage, "report");
                assert_eq!(missing, vec!["index", "expand", "retrieve", "match", "verdict"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rerun_expand_is_a_noop_without_calls() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_fixture(tmp.path());
        let (backend, provider) = mock_provider(&cfg);
        let mut p = Pipeline::open(&tmp.path().join("run"), cfg, false).unwrap().with_provider(provider);
        p.run(Stage::Ingest).unwrap();
        p.run(Stage::Index).unwrap();
        p.run(Stage::Expand).unwrap();
        let calls = backend.calls();
        assert!(calls > 0);
        assert_eq!(p.run(Stage::Expand).unwrap(), StageOutcome::Skipped);
        assert_eq!(backend.calls(), calls);
    }

    #[test]
    fn drift_requires_force_and_invalidates_downstream() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_fixture(tmp.path());
        let run = tmp.path().join("run");
        {
            let mut p = Pipeline::open(&run, cfg.clone(), false).unwrap();
            p.run(Stage::Ingest).unwrap();
            p.run(Stage::Index).unwrap();
        }
        let mut changed = cfg.clone();
        changed.k = 3;
        {
            let mut p = Pipeline::open(&run, changed.clone(), false).unwrap();
            assert!(matches!(p.run(Stage::Index), Err(Error::ConfigDrift)));
        }
        let mut p = Pipeline::open(&run, changed, true).unwrap();
        assert_eq!(p.run(Stage::Index).unwrap(), StageOutcome::Ran);
        assert!(p.manifest().is_complete(Stage::Ingest));
        assert!(!p.manifest().is_complete(Stage::Expand));
    }

    #[test]
    fn runtime_only_changes_are_not_drift() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_fixture(tmp.path());
        let run = tmp.path().join("run");
        Pipeline::open(&run, cfg.clone(), false).unwrap().run(Stage::Ingest).unwrap();
        let mut other = cfg;
        other.parallelism = 1;
        other.provider.cache_dir = Some(tmp.path().join("elsewhere"));
        let mut p = Pipeline::open(&run, other, false).unwrap();
        assert_eq!(p.run(Stage::Ingest).unwrap(), StageOutcome::Skipped);
    }

    #[test]
    fn lock_excludes_second_owner() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_fixture(tmp.path());
        let run = tmp.path().join("run");
        let p = Pipeline::open(&run, cfg.clone(), false).unwrap();
        assert!(matches!(Pipeline::open(&run, cfg.clone(), false), Err(Error::Locked(_))));
        drop(p);
        assert!(Pipeline::open(&run, cfg, false).is_ok());
    }

    #[test]
    fn full_run_writes_report() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_fixture(tmp.path());
        let (_, provider) = mock_provider(&cfg);
        let run = tmp.path().join("run");
        let mut p = Pipeline::open(&run, cfg, false).unwrap().with_provider(provider);
        let outcomes = p.run_all().unwrap();
        assert!(outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran));
        let report = std::fs::read_to_string(run.join("report.json")).unwrap();
        assert!(report.contains("Recall@2"));
        let txt = std::fs::read_to_string(run.join("report.txt")).unwrap();
        assert!(txt.contains("\u{ac}M"));
        let matches: Vec<MatchRecord> = read_jsonl(&run.join("matches.jsonl")).unwrap();
        assert_eq!(matches.len(), 4);
        // c1's canned text repeats a gold sentence.
        assert!(matches.iter().filter(|m| m.claim_id == "c1").all(|m| m.matched));
        let verdicts: Vec<VerdictRecord> = read_jsonl(&run.join("verdicts.jsonl")).unwrap();
        assert_eq!(verdicts.len(), 2 * 3);
    }

    #[test]
    fn hyde_pipeline_uses_dense_index() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = write_fixture(tmp.path());
        cfg.method = Method::Hyde;
        let (_, provider) = mock_provider(&cfg);
        let run = tmp.path().join("run");
        let mut p = Pipeline::open(&run, cfg, false).unwrap().with_provider(provider);
        p.run_all().unwrap();
        assert!(run.join("index/dense/manifest.json").exists());
        let report = std::fs::read_to_string(run.join("report.json")).unwrap();
        assert!(report.contains("\"baseline\": \"Contriever\""));
    }
}
