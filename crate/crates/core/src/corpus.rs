//! Document collections and gold relevance labels.
//!
//! A [`LabeledCollection`] is loaded once and then shared read-only by every
//! run. Document order is fixed at load time and defines the row index used by
//! all feature matrices, so `collection.documents[i]` and row `i` of any
//! [`SparseMatrix`](crate::features::SparseMatrix) always describe the same
//! document.
//!
//! Input formats:
//!
//! - corpus: JSONL, one `{"doc_id": ..., "text": ...}` object per line
//! - labels: qrels-style rows `category_id doc_id relevance`
//! - groups: CSV `category_id,difficulty,prevalence`

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate doc_id {0}")]
    DuplicateDocId(String),
    #[error("unknown doc_id {0}")]
    UnknownDocId(String),
    #[error("unknown category {0}")]
    UnknownCategory(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

/// Tokenizer settings. The default lowercases, splits on any
/// non-alphanumeric character and drops tokens longer than 64 characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub max_token_chars: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { lowercase: true, max_token_chars: 64 }
    }
}

impl TokenizerConfig {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty() && t.chars().count() <= self.max_token_chars)
            .map(|t| if self.lowercase { t.to_lowercase() } else { t.to_string() })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>, tokenizer: &TokenizerConfig) -> Self {
        let text = text.into();
        let tokens = tokenizer.tokenize(&text);
        Self { doc_id: doc_id.into(), text, tokens }
    }

    pub fn length(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Hard,
    Medium,
    Easy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prevalence {
    Rare,
    Medium,
    Common,
}

impl FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(Difficulty::Hard),
            "medium" => Ok(Difficulty::Medium),
            "easy" => Ok(Difficulty::Easy),
            other => Err(format!("unknown difficulty {other:?}")),
        }
    }
}

impl FromStr for Prevalence {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rare" => Ok(Prevalence::Rare),
            "medium" => Ok(Prevalence::Medium),
            "common" => Ok(Prevalence::Common),
            other => Err(format!("unknown prevalence {other:?}")),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Hard => "hard",
            Difficulty::Medium => "medium",
            Difficulty::Easy => "easy",
        })
    }
}

impl fmt::Display for Prevalence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Prevalence::Rare => "rare",
            Prevalence::Medium => "medium",
            Prevalence::Common => "common",
        })
    }
}

/// Difficulty × prevalence cell a category is reported under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoryGroup {
    pub difficulty: Difficulty,
    pub prevalence: Prevalence,
}

/// Gold labels for one category. `positives` holds row indices into the
/// owning collection; every other document is non-relevant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryLabels {
    pub category_id: String,
    pub positives: BTreeSet<usize>,
    pub group: Option<CategoryGroup>,
}

impl CategoryLabels {
    pub fn is_positive(&self, row: usize) -> bool {
        self.positives.contains(&row)
    }

    pub fn total_positives(&self) -> usize {
        self.positives.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledCollection {
    pub documents: Vec<Document>,
    pub categories: BTreeMap<String, CategoryLabels>,
    pub avg_doc_length: f64,
    index: HashMap<String, usize>,
}

impl LabeledCollection {
    /// Builds a collection from documents in their final order.
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(documents.len());
        for (row, doc) in documents.iter().enumerate() {
            if index.insert(doc.doc_id.clone(), row).is_some() {
                return Err(CorpusError::DuplicateDocId(doc.doc_id.clone()));
            }
        }
        let total: usize = documents.iter().map(Document::length).sum();
        let avg_doc_length = if documents.is_empty() { 0.0 } else { total as f64 / documents.len() as f64 };
        Ok(Self { documents, categories: BTreeMap::new(), avg_doc_length, index })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn row_of(&self, doc_id: &str) -> Option<usize> {
        self.index.get(doc_id).copied()
    }

    pub fn doc_id(&self, row: usize) -> &str {
        &self.documents[row].doc_id
    }

    pub fn category(&self, category_id: &str) -> Result<&CategoryLabels, CorpusError> {
        self.categories.get(category_id).ok_or_else(|| CorpusError::UnknownCategory(category_id.to_string()))
    }

    /// Attaches gold labels parsed from qrels-style text.
    ///
    /// Categories without any positive, or whose positives cover the whole
    /// collection, cannot seed a run; they are dropped with a warning and
    /// their ids returned.
    pub fn attach_labels<R: BufRead>(&mut self, reader: R) -> Result<Vec<String>, CorpusError> {
        let mut seen: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| CorpusError::Malformed { line: lineno + 1, message: e.to_string() })?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (category, doc_id, rel) = match fields.as_slice() {
                [c, d, r] => (*c, *d, *r),
                // TREC qrels carry an unused iteration column
                [c, _, d, r] => (*c, *d, *r),
                _ => {
                    return Err(CorpusError::Malformed {
                        line: lineno + 1,
                        message: format!("expected `category_id doc_id relevance`, got {line:?}"),
                    })
                }
            };
            let relevant = match rel {
                "0" => false,
                "1" => true,
                other => {
                    return Err(CorpusError::Malformed {
                        line: lineno + 1,
                        message: format!("relevance must be 0 or 1, got {other:?}"),
                    })
                }
            };
            let row = self.row_of(doc_id).ok_or_else(|| CorpusError::UnknownDocId(doc_id.to_string()))?;
            let positives = seen.entry(category.to_string()).or_default();
            if relevant {
                positives.insert(row);
            }
        }

        let mut excluded = Vec::new();
        for (category_id, positives) in seen {
            if positives.is_empty() {
                log::warn!("category {category_id} has no positive documents; excluded from runs");
                excluded.push(category_id);
                continue;
            }
            if positives.len() == self.len() {
                log::warn!("category {category_id} has no negative documents; excluded from runs");
                excluded.push(category_id);
                continue;
            }
            let group = self.categories.get(&category_id).and_then(|c| c.group);
            self.categories.insert(category_id.clone(), CategoryLabels { category_id, positives, group });
        }
        Ok(excluded)
    }

    /// Attaches difficulty/prevalence groups from `category_id,difficulty,prevalence`
    /// CSV rows. Rows naming categories that are not loaded are ignored.
    pub fn attach_groups<R: Read>(&mut self, reader: R) -> Result<(), CorpusError> {
        let groups = read_groups(reader)?;
        for (category_id, group) in groups {
            if let Some(labels) = self.categories.get_mut(&category_id) {
                labels.group = Some(group);
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct CorpusRecord {
    doc_id: String,
    text: String,
}

/// Parses a JSONL corpus from a reader.
pub fn read_corpus<R: BufRead>(reader: R, tokenizer: &TokenizerConfig) -> Result<LabeledCollection, CorpusError> {
    let mut documents = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Malformed { line: lineno + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: lineno + 1, message: e.to_string() })?;
        documents.push(Document::new(record.doc_id, record.text, tokenizer));
    }
    LabeledCollection::from_documents(documents)
}

pub fn load_corpus(path: &Path, tokenizer: &TokenizerConfig) -> Result<LabeledCollection, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_corpus(BufReader::new(file), tokenizer)
}

/// Loads qrels labels into `collection`, returning the ids of excluded categories.
pub fn load_labels(path: &Path, collection: &mut LabeledCollection) -> Result<Vec<String>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    collection.attach_labels(BufReader::new(file))
}

pub fn load_groups(path: &Path, collection: &mut LabeledCollection) -> Result<(), CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    collection.attach_groups(file)
}

/// Reads a category-group CSV. A header row is accepted but not required.
pub fn read_groups<R: Read>(reader: R) -> Result<BTreeMap<String, CategoryGroup>, CorpusError> {
    let mut csv = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, row) in csv.records().enumerate() {
        let row = row.map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        if row.len() != 3 {
            return Err(CorpusError::Malformed {
                line: i + 1,
                message: "expected `category_id,difficulty,prevalence`".into(),
            });
        }
        if i == 0 && row[0].eq_ignore_ascii_case("category_id") {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed { line: i + 1, message };
        let difficulty = row[1].parse().map_err(malformed)?;
        let prevalence = row[2].parse().map_err(malformed)?;
        out.insert(row[0].to_string(), CategoryGroup { difficulty, prevalence });
    }
    Ok(out)
}

pub fn read_groups_file(path: &Path) -> Result<BTreeMap<String, CategoryGroup>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_groups(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DedupeStats {
    pub read: usize,
    pub kept: usize,
    pub dropped: usize,
}

/// Copies a JSONL corpus, keeping only the first document for each distinct
/// MD5 digest of its text. Lines are passed through unchanged.
pub fn dedupe_corpus<R: BufRead, W: Write>(reader: R, writer: W) -> Result<DedupeStats, CorpusError> {
    let mut out = BufWriter::new(writer);
    let mut digests = BTreeSet::new();
    let mut stats = DedupeStats::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Malformed { line: lineno + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: lineno + 1, message: e.to_string() })?;
        stats.read += 1;
        let digest: [u8; 16] = Md5::digest(record.text.as_bytes()).into();
        if digests.insert(digest) {
            stats.kept += 1;
            writeln!(out, "{line}").map_err(|e| CorpusError::Malformed { line: lineno + 1, message: e.to_string() })?;
        } else {
            stats.dropped += 1;
        }
    }
    out.flush().map_err(|e| CorpusError::Malformed { line: 0, message: e.to_string() })?;
    Ok(stats)
}
