//! Document × feature sparse matrices.
//!
//! Two feature families feed the classifier:
//!
//! - **BM25-saturated** term weights computed from the collection's tokens,
//!   `tf / (tf + k1 * ((1 - b) + b * dl / avgdl))`. No IDF factor: the
//!   learner assigns per-feature weights itself.
//! - **Learned-sparse** (SPLADE) vectors produced offline and read from a
//!   JSONL interchange file `{"doc_id": str, "vector": {"<index>": weight}}`.
//!   Vectors are pruned to the top `s` entries at load time.
//!
//! Matrices are stored row-compressed with `f32` weights; consumers accumulate
//! in `f64`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledCollection;

/// Vocabulary size of the released BERT-based SPLADE checkpoint.
pub const SPLADE_VOCAB_SIZE: usize = 30522;

/// Share of the vocabulary kept per document by default, as `1 / N`.
pub const DEFAULT_TOP_DIVISOR: usize = 10;

const CACHE_MAGIC: &[u8; 8] = b"TARSPMAT";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("average document length must be positive (empty collection?), got {0}")]
    NonPositiveAvgdl(f64),
    #[error("invalid BM25 parameter: {0}")]
    InvalidParameter(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unknown doc_id {0}")]
    UnknownDocId(String),
    #[error("duplicate vector for {0}")]
    DuplicateDocId(String),
    #[error("no vector for {0}")]
    MissingVector(String),
    #[error("feature index {index} out of range for vocabulary size {vocab_size}")]
    IndexOutOfRange { index: u64, vocab_size: usize },
    #[error("negative weight {weight} at feature {index}")]
    NegativeWeight { index: u64, weight: f64 },
    #[error("non-finite weight at feature {0}")]
    NonFiniteWeight(u64),
    #[error("row {row}: feature indices must be strictly increasing")]
    UnsortedRow { row: usize },
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("matrix cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFamily {
    Bm25,
    Splade,
}

impl fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureFamily::Bm25 => "bm25",
            FeatureFamily::Splade => "splade",
        })
    }
}

/// Sorted `(feature_index, weight)` pairs for one document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    pub entries: Vec<(u32, f32)>,
}

impl SparseVector {
    /// Sorts by feature index. Callers guarantee indices are distinct.
    pub fn from_unsorted(mut entries: Vec<(u32, f32)>) -> Self {
        entries.sort_by_key(|&(i, _)| i);
        Self { entries }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// Keeps the `s` highest-weighted entries, ties going to the lower feature
/// index. The result is sorted by feature index.
pub fn prune_top_s(vector: &SparseVector, s: usize) -> SparseVector {
    if vector.entries.len() <= s {
        return vector.clone();
    }
    let mut ranked = vector.entries.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(s);
    SparseVector::from_unsorted(ranked)
}

/// 10% of the vocabulary, rounded down (3052 for a 30522-term vocabulary),
/// and at least 1.
pub fn default_top_s(vocab_size: usize) -> usize {
    (vocab_size / DEFAULT_TOP_DIVISOR).max(1)
}

/// Borrowed view of one matrix row.
#[derive(Debug, Clone, Copy)]
pub struct SparseRow<'a> {
    pub indices: &'a [u32],
    pub values: &'a [f32],
}

impl SparseRow<'_> {
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.indices.iter().zip(self.values).map(|(&j, &v)| dense[j as usize] * f64::from(v)).sum()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().zip(self.values).map(|(&j, &v)| (j as usize, f64::from(v)))
    }
}

/// Compressed sparse row matrix, one row per document in collection order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    family: FeatureFamily,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseMatrix {
    pub fn from_rows(family: FeatureFamily, n_cols: usize, rows: Vec<SparseVector>) -> Result<Self, FeatureError> {
        let nnz = rows.iter().map(SparseVector::nnz).sum();
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        indptr.push(0);
        for (row, vector) in rows.into_iter().enumerate() {
            let mut prev: Option<u32> = None;
            for (j, w) in vector.entries {
                if prev.is_some_and(|p| p >= j) {
                    return Err(FeatureError::UnsortedRow { row });
                }
                if j as usize >= n_cols {
                    return Err(FeatureError::IndexOutOfRange { index: u64::from(j), vocab_size: n_cols });
                }
                check_weight(u64::from(j), f64::from(w))?;
                prev = Some(j);
                indices.push(j);
                values.push(w);
            }
            indptr.push(indices.len());
        }
        Ok(Self { family, n_cols, indptr, indices, values })
    }

    pub fn family(&self) -> FeatureFamily {
        self.family
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> SparseRow<'_> {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        SparseRow { indices: &self.indices[lo..hi], values: &self.values[lo..hi] }
    }

    pub fn row_vector(&self, i: usize) -> SparseVector {
        let row = self.row(i);
        SparseVector { entries: row.indices.iter().copied().zip(row.values.iter().copied()).collect() }
    }

    /// Rescales every non-empty row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self) {
        for i in 0..self.n_rows() {
            let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
            let norm = self.values[lo..hi].iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut self.values[lo..hi] {
                    *v = (f64::from(*v) / norm) as f32;
                }
            }
        }
    }

    /// Writes the versioned little-endian binary cache.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        let family: u8 = match self.family {
            FeatureFamily::Bm25 => 0,
            FeatureFamily::Splade => 1,
        };
        w.write_all(&[family, 0, 0, 0])?;
        for n in [self.n_rows(), self.n_cols, self.nnz()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for &p in &self.indptr {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for &j in &self.indices {
            w.write_all(&j.to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self, FeatureError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(FeatureError::Cache("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(FeatureError::Cache(format!("unsupported format version {version}")));
        }
        let mut fam = [0u8; 4];
        r.read_exact(&mut fam)?;
        let family = match fam[0] {
            0 => FeatureFamily::Bm25,
            1 => FeatureFamily::Splade,
            other => return Err(FeatureError::Cache(format!("unknown family tag {other}"))),
        };
        let n_rows = read_u64(&mut r)? as usize;
        let n_cols = read_u64(&mut r)? as usize;
        let nnz = read_u64(&mut r)? as usize;
        let indptr = (0..=n_rows).map(|_| read_u64(&mut r).map(|p| p as usize)).collect::<Result<Vec<_>, _>>()?;
        let indices = (0..nnz).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let values = (0..nnz).map(|_| read_u32(&mut r).map(f32::from_bits)).collect::<Result<Vec<_>, _>>()?;
        if indptr.first() != Some(&0) || indptr.last() != Some(&nnz) || indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(FeatureError::Cache("inconsistent row pointers".into()));
        }
        let rows = indptr
            .windows(2)
            .map(|w| SparseVector {
                entries: indices[w[0]..w[1]].iter().copied().zip(values[w[0]..w[1]].iter().copied()).collect(),
            })
            .collect();
        Self::from_rows(family, n_cols, rows)
    }

    pub fn write_cache_file(&self, path: &Path) -> Result<(), FeatureError> {
        self.write_cache(std::io::BufWriter::new(File::create(path)?))
    }

    pub fn read_cache_file(path: &Path) -> Result<Self, FeatureError> {
        Self::read_cache(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn check_weight(index: u64, weight: f64) -> Result<(), FeatureError> {
    if !weight.is_finite() {
        return Err(FeatureError::NonFiniteWeight(index));
    }
    if weight < 0.0 {
        return Err(FeatureError::NegativeWeight { index, weight });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Saturated term-frequency weight, in `[0, 1)`.
pub fn bm25_weight(tf: f64, dl: f64, avgdl: f64, k1: f64, b: f64) -> Result<f64, FeatureError> {
    if !(avgdl > 0.0) {
        return Err(FeatureError::NonPositiveAvgdl(avgdl));
    }
    if !(k1 > 0.0) || !(0.0..=1.0).contains(&b) || tf < 0.0 || dl < 0.0 {
        return Err(FeatureError::InvalidParameter(format!("tf={tf} dl={dl} k1={k1} b={b}")));
    }
    if tf == 0.0 {
        return Ok(0.0);
    }
    Ok(tf / (tf + k1 * ((1.0 - b) + b * dl / avgdl)))
}

/// Term → column mapping, in order of first appearance in the collection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn get(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    fn intern(&mut self, term: &str) -> u32 {
        if let Some(&i) = self.index.get(term) {
            return i;
        }
        let i = self.terms.len() as u32;
        self.terms.push(term.to_string());
        self.index.insert(term.to_string(), i);
        i
    }
}

/// Builds the BM25-saturated matrix for `collection`.
pub fn encode_bm25(
    collection: &LabeledCollection,
    params: Bm25Params,
) -> Result<(SparseMatrix, Vocabulary), FeatureError> {
    let avgdl = collection.avg_doc_length;
    if !(avgdl > 0.0) {
        return Err(FeatureError::NonPositiveAvgdl(avgdl));
    }
    let mut vocab = Vocabulary::default();
    let mut rows = Vec::with_capacity(collection.len());
    for doc in &collection.documents {
        let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
        for token in &doc.tokens {
            *tf.entry(vocab.intern(token)).or_default() += 1;
        }
        let dl = doc.length() as f64;
        let entries = tf
            .into_iter()
            .map(|(j, count)| Ok((j, bm25_weight(f64::from(count), dl, avgdl, params.k1, params.b)? as f32)))
            .collect::<Result<Vec<_>, FeatureError>>()?;
        rows.push(SparseVector { entries });
    }
    let matrix = SparseMatrix::from_rows(FeatureFamily::Bm25, vocab.len(), rows)?;
    Ok((matrix, vocab))
}

/// Settings for loading learned-sparse vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpladeOptions {
    pub vocab_size: usize,
    /// Entries kept per document; `None` means 10% of the vocabulary.
    pub top_s: Option<usize>,
    pub l2_normalize: bool,
}

impl Default for SpladeOptions {
    fn default() -> Self {
        Self { vocab_size: SPLADE_VOCAB_SIZE, top_s: None, l2_normalize: false }
    }
}

impl SpladeOptions {
    pub fn effective_top_s(&self) -> usize {
        self.top_s.unwrap_or_else(|| default_top_s(self.vocab_size))
    }
}

#[derive(Deserialize)]
struct VectorRecord {
    doc_id: String,
    vector: BTreeMap<String, f64>,
}

fn parse_vector_line(line: &str, lineno: usize, vocab_size: usize) -> Result<(String, SparseVector), FeatureError> {
    let record: VectorRecord =
        serde_json::from_str(line).map_err(|e| FeatureError::Malformed { line: lineno, message: e.to_string() })?;
    let mut entries = Vec::with_capacity(record.vector.len());
    for (key, weight) in &record.vector {
        let index: u64 = key.trim().parse().map_err(|_| FeatureError::Malformed {
            line: lineno,
            message: format!("feature index {key:?} is not a non-negative integer"),
        })?;
        if index >= vocab_size as u64 {
            return Err(FeatureError::IndexOutOfRange { index, vocab_size });
        }
        check_weight(index, *weight)?;
        if *weight > 0.0 {
            entries.push((index as u32, *weight as f32));
        }
    }
    let vector = SparseVector::from_unsorted(entries);
    if vector.entries.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(FeatureError::Malformed { line: lineno, message: "repeated feature index".into() });
    }
    Ok((record.doc_id, vector))
}

/// Reads learned-sparse vectors and aligns them to collection order. Each
/// vector is pruned to `options.effective_top_s()` entries.
pub fn read_sparse_vectors<R: BufRead>(
    reader: R,
    collection: &LabeledCollection,
    options: &SpladeOptions,
) -> Result<SparseMatrix, FeatureError> {
    let top_s = options.effective_top_s();
    let mut rows: Vec<Option<SparseVector>> = vec![None; collection.len()];
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (doc_id, vector) = parse_vector_line(&line, i + 1, options.vocab_size)?;
        let row = collection.row_of(&doc_id).ok_or_else(|| FeatureError::UnknownDocId(doc_id.clone()))?;
        if rows[row].is_some() {
            return Err(FeatureError::DuplicateDocId(doc_id));
        }
        rows[row] = Some(prune_top_s(&vector, top_s));
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(row, v)| v.ok_or_else(|| FeatureError::MissingVector(collection.doc_id(row).to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut matrix = SparseMatrix::from_rows(FeatureFamily::Splade, options.vocab_size, rows)?;
    if options.l2_normalize {
        matrix.l2_normalize_rows();
    }
    Ok(matrix)
}

pub fn load_sparse_vectors(
    path: &Path,
    collection: &LabeledCollection,
    options: &SpladeOptions,
) -> Result<SparseMatrix, FeatureError> {
    read_sparse_vectors(BufReader::new(File::open(path)?), collection, options)
}

/// Outcome of checking an interchange file without building a matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorValidation {
    pub records: usize,
    pub errors: Vec<String>,
    pub max_nnz: usize,
    pub mean_nnz: f64,
}

impl VectorValidation {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks every record of an interchange file, collecting all problems
/// rather than stopping at the first. When `collection` is given, doc ids
/// are checked against it and missing documents are reported.
pub fn validate_vectors<R: BufRead>(
    reader: R,
    collection: Option<&LabeledCollection>,
    vocab_size: usize,
) -> VectorValidation {
    let mut report = VectorValidation::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut total_nnz = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                report.errors.push(format!("line {lineno}: {e}"));
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        report.records += 1;
        match parse_vector_line(&line, lineno, vocab_size) {
            Ok((doc_id, vector)) => {
                total_nnz += vector.nnz();
                report.max_nnz = report.max_nnz.max(vector.nnz());
                if let Some(c) = collection {
                    if c.row_of(&doc_id).is_none() {
                        report.errors.push(format!("line {lineno}: unknown doc_id {doc_id}"));
                    }
                }
                if let Some(first) = seen.insert(doc_id.clone(), lineno) {
                    report.errors.push(format!("line {lineno}: duplicate vector for {doc_id} (first on line {first})"));
                }
            }
            Err(e @ FeatureError::Malformed { .. }) => report.errors.push(e.to_string()),
            Err(e) => report.errors.push(format!("line {lineno}: {e}")),
        }
    }
    if let Some(c) = collection {
        for doc in &c.documents {
            if !seen.contains_key(&doc.doc_id) {
                report.errors.push(format!("no vector for {}", doc.doc_id));
            }
        }
    }
    if report.records > 0 {
        report.mean_nnz = total_nnz as f64 / report.records as f64;
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixStats {
    pub avg_nnz_per_row: f64,
    pub density: f64,
}

pub fn matrix_stats(matrix: &SparseMatrix) -> Result<MatrixStats, FeatureError> {
    if matrix.n_rows() == 0 {
        return Err(FeatureError::EmptyMatrix);
    }
    let nnz = matrix.nnz() as f64;
    let cells = matrix.n_rows() as f64 * matrix.n_cols() as f64;
    Ok(MatrixStats {
        avg_nnz_per_row: nnz / matrix.n_rows() as f64,
        density: if cells > 0.0 { nnz / cells } else { 0.0 },
    })
}
