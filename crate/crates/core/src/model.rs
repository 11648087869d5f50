//! Domain types, dataset loading and validation.
//!
//! Claims and documents are read from JSON-lines files. Loaded collections are
//! immutable and may be shared across threads for reading.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// One piece of gold evidence: a pointer into the corpus or human-written text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, try_from = "RawEvidence")]
pub enum Evidence {
    CorpusRef { doc_id: String },
    FreeText { text: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvidence {
    doc_id: Option<String>,
    text: Option<String>,
}

impl TryFrom<RawEvidence> for Evidence {
    type Error = String;
    fn try_from(raw: RawEvidence) -> Result<Self, String> {
        match (raw.doc_id, raw.text) {
            (Some(doc_id), None) => Ok(Evidence::CorpusRef { doc_id }),
            (None, Some(text)) => Ok(Evidence::FreeText { text }),
            (Some(_), Some(_)) => Err("evidence must have either `doc_id` or `text`, not both".into()),
            (None, None) => Err("evidence needs `doc_id` or `text`".into()),
        }
    }
}

impl Evidence {
    pub fn doc_id(&self) -> Option<&str> {
        match self {
            Evidence::CorpusRef { doc_id } => Some(doc_id),
            Evidence::FreeText { .. } => None,
        }
    }
}

/// A checkable statement with its gold evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    #[serde(rename = "claim")]
    pub text: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
}

impl Claim {
    pub fn corpus_refs(&self) -> impl Iterator<Item = &str> {
        self.evidence.iter().filter_map(Evidence::doc_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: Option<String>,
    pub text: String,
}

impl Document {
    /// Title prepended to the body, as indexed and shown to the verdict judge.
    pub fn titled_text(&self) -> String {
        match self.title.as_deref().map(str::trim) {
            Some(t) if !t.is_empty() => format!("{t}: {}", self.text),
            _ => self.text.clone(),
        }
    }
}

/// The knowledge store: documents addressable by id, in file order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
    /// Records dropped at load because their text was empty.
    pub skipped_empty: usize,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, DataError> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if let Some(prev) = by_id.insert(d.doc_id.clone(), i) {
                return Err(DataError::DuplicateId {
                    path: PathBuf::from("<memory>"),
                    id: d.doc_id.clone(),
                    first_line: prev + 1,
                    second_line: i + 1,
                });
            }
        }
        Ok(Corpus {
            docs,
            by_id,
            skipped_empty: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }
}

/// Canonical veracity labels plus a case-insensitive alias table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
    aliases: BTreeMap<String, String>,
}

impl LabelSet {
    pub fn new(labels: &[&str], aliases: &[(&str, &str)]) -> Result<Self, DataError> {
        let mut set = LabelSet {
            labels: Vec::new(),
            aliases: BTreeMap::new(),
        };
        for &l in labels {
            if set.labels.iter().any(|x| x == l) {
                return Err(DataError::Config(format!("duplicate label `{l}`")));
            }
            set.labels.push(l.to_owned());
            set.aliases.insert(l.to_lowercase(), l.to_owned());
        }
        for &(alias, canonical) in aliases {
            if !set.labels.iter().any(|x| x == canonical) {
                return Err(DataError::Config(format!(
                    "alias `{alias}` targets unknown label `{canonical}`"
                )));
            }
            match set.aliases.insert(alias.to_lowercase(), canonical.to_owned()) {
                Some(prev) if prev != canonical => {
                    return Err(DataError::Config(format!(
                        "alias `{alias}` maps to both `{prev}` and `{canonical}`"
                    )))
                }
                _ => {}
            }
        }
        Ok(set)
    }

    pub fn fever() -> Self {
        Self::new(
            &["supported", "refuted", "not enough evidence"],
            &[
                ("supports", "supported"),
                ("refutes", "refuted"),
                ("not enough info", "not enough evidence"),
                ("nei", "not enough evidence"),
            ],
        )
        .expect("static label set")
    }

    /// SciFact treats CONTRADICT as refuted.
    pub fn scifact() -> Self {
        Self::new(
            &["supported", "refuted", "not enough evidence"],
            &[
                ("support", "supported"),
                ("contradict", "refuted"),
                ("noinfo", "not enough evidence"),
                ("not enough info", "not enough evidence"),
            ],
        )
        .expect("static label set")
    }

    pub fn averitec() -> Self {
        Self::new(
            &[
                "supported",
                "refuted",
                "not enough evidence",
                "conflicting evidence",
            ],
            &[
                ("conflicting evidence/cherrypicking", "conflicting evidence"),
                ("cherrypicking", "conflicting evidence"),
            ],
        )
        .expect("static label set")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Map any alias (case-insensitive, surrounding whitespace ignored) to its canonical label.
    pub fn normalize(&self, raw: &str) -> Option<&str> {
        self.aliases
            .get(&raw.trim().to_lowercase())
            .map(String::as_str)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

/// Benchmark family. Selects label set and expansion prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    #[default]
    Fever,
    Scifact,
    Averitec,
}

impl Dataset {
    pub fn label_set(self) -> LabelSet {
        match self {
            Dataset::Fever => LabelSet::fever(),
            Dataset::Scifact => LabelSet::scifact(),
            Dataset::Averitec => LabelSet::averitec(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Fever => "FEVER",
            Dataset::Scifact => "SciFact",
            Dataset::Averitec => "AVeriTeC",
        }
    }
}

/// Result of [`load_claims`].
#[derive(Debug, Clone, Default)]
pub struct ClaimSet {
    pub claims: Vec<Claim>,
    /// Claims dropped because they carried no gold evidence.
    pub skipped_no_evidence: usize,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

/// Load a claims file, dropping claims without gold evidence and normalizing labels.
pub fn load_claims(path: &Path, label_set: &LabelSet) -> Result<ClaimSet, DataError> {
    let mut out = ClaimSet::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| DataError::Malformed {
            path: path.to_owned(),
            line: line_no,
            message,
        };
        let mut claim: Claim = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if claim.id.trim().is_empty() {
            return Err(malformed("empty id".into()));
        }
        if claim.text.trim().is_empty() {
            return Err(malformed("empty claim text".into()));
        }
        if let Some(first_line) = seen.insert(claim.id.clone(), line_no) {
            return Err(DataError::DuplicateId {
                path: path.to_owned(),
                id: claim.id,
                first_line,
                second_line: line_no,
            });
        }
        claim.label = match claim.label.take() {
            None => None,
            Some(raw) => Some(
                label_set
                    .normalize(&raw)
                    .ok_or_else(|| DataError::UnknownLabel {
                        path: path.to_owned(),
                        line: line_no,
                        value: raw.clone(),
                    })?
                    .to_owned(),
            ),
        };
        claim.evidence.retain(|e| match e {
            Evidence::CorpusRef { doc_id } => !doc_id.trim().is_empty(),
            Evidence::FreeText { text } => !text.trim().is_empty(),
        });
        if claim.evidence.is_empty() {
            out.skipped_no_evidence += 1;
            continue;
        }
        out.claims.push(claim);
    }
    Ok(out)
}

/// Write claims back in the claims file format.
pub fn write_claims(path: &Path, claims: &[Claim]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for c in claims {
        serde_json::to_writer(&mut buf, c).map_err(|e| DataError::Invalid(e.to_string()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Load a corpus file. Empty documents are skipped with a warning.
pub fn load_corpus(path: &Path) -> Result<Corpus, DataError> {
    let mut docs = Vec::new();
    let mut lines_of: HashMap<String, usize> = HashMap::new();
    let mut skipped_empty = 0;
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            path: path.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = lines_of.get(&doc.doc_id) {
            return Err(DataError::DuplicateId {
                path: path.to_owned(),
                id: doc.doc_id,
                first_line,
                second_line: line_no,
            });
        }
        lines_of.insert(doc.doc_id.clone(), line_no);
        if doc.text.trim().is_empty() {
            log::warn!("{}:{line_no}: document `{}` has empty text, skipped", path.display(), doc.doc_id);
            skipped_empty += 1;
            continue;
        }
        docs.push(doc);
    }
    let mut corpus = Corpus::from_documents(docs)?;
    corpus.skipped_empty = skipped_empty;
    log::info!("loaded {} documents from {}", corpus.len(), path.display());
    Ok(corpus)
}

/// `(claim_id, doc_id)` pairs whose document is missing from the corpus.
pub fn validate_references(claims: &[Claim], corpus: &Corpus) -> Vec<(String, String)> {
    claims
        .iter()
        .flat_map(|c| {
            c.corpus_refs()
                .filter(|d| !corpus.contains(d))
                .map(move |d| (c.id.clone(), d.to_owned()))
        })
        .collect()
}

/// Drop unresolved corpus references, then claims left without evidence.
/// Returns the number of claims dropped.
pub fn drop_unresolved(claims: &mut Vec<Claim>, corpus: &Corpus) -> usize {
    let before = claims.len();
    for c in claims.iter_mut() {
        c.evidence.retain(|e| e.doc_id().map_or(true, |d| corpus.contains(d)));
    }
    claims.retain(|c| !c.evidence.is_empty());
    before - claims.len()
}

/// How gold evidence is compared with retrieved evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Gold evidence points into the corpus: Recall@k, NDCG@k.
    DocumentIds,
    /// Gold evidence is free text: Hungarian-assigned METEOR / BERTScore.
    FreeText,
}

/// Whichever evidence variant is in the majority decides the mode; ties go to ids.
pub fn dominant_mode(claims: &[Claim]) -> EvalMode {
    let (ids, texts) = claims
        .iter()
        .flat_map(|c| c.evidence.iter())
        .fold((0usize, 0usize), |(i, t), e| match e {
            Evidence::CorpusRef { .. } => (i + 1, t),
            Evidence::FreeText { .. } => (i, t + 1),
        });
    if texts > ids {
        EvalMode::FreeText
    } else {
        EvalMode::DocumentIds
    }
}

/// Write through a temporary file and rename, so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DataError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| DataError::io(path, e))?;
    tmp.persist(path).map_err(|e| DataError::io(path, e.error))?;
    Ok(())
}

/// Serialize records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| DataError::Invalid(e.to_string()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let mut out = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            path: path.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
