//! Generated collections with a known relevant class.
//!
//! Two shapes are provided. [`signature_corpus`] hides relevance in a small
//! set of signature tokens on top of background text. [`complementary_corpus`]
//! splits the relevant class between a text signature and a learned-sparse
//! vector signature so that neither family alone sees all of it.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{CorpusError, Document, LabeledCollection, TokenizerConfig};
use crate::features::{FeatureError, FeatureFamily, SparseMatrix, SparseVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SignatureSpec {
    pub n_docs: usize,
    pub n_relevant: usize,
    pub background_vocab: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    /// Size of the signature token pool.
    pub signature_tokens: usize,
    /// Distinct signature tokens planted in each relevant document.
    pub signature_per_doc: usize,
    /// Per-token probability that a non-relevant document carries a
    /// signature token.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SignatureSpec {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            n_relevant: 100,
            background_vocab: 3000,
            min_doc_len: 40,
            max_doc_len: 120,
            signature_tokens: 12,
            signature_per_doc: 4,
            noise: 0.01,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplementarySpec {
    pub text: SignatureSpec,
    /// Learned-sparse vocabulary size.
    pub vector_vocab: usize,
    /// Background entries per vector.
    pub vector_nnz: usize,
    /// Fraction of relevant documents signalled by text only; the same
    /// fraction is signalled by vectors only, the rest by both.
    pub single_family_fraction: f64,
}

impl Default for ComplementarySpec {
    fn default() -> Self {
        Self { text: SignatureSpec::default(), vector_vocab: 2048, vector_nnz: 60, single_family_fraction: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDoc {
    pub doc_id: String,
    pub text: String,
    pub vector: Option<SparseVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub category_id: String,
    pub docs: Vec<SyntheticDoc>,
    pub relevant: BTreeSet<String>,
    pub vector_vocab: usize,
}

#[derive(Serialize)]
struct CorpusLine<'a> {
    doc_id: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct VectorLine<'a> {
    doc_id: &'a str,
    vector: serde_json::Map<String, serde_json::Value>,
}

impl SyntheticCorpus {
    /// Collection with the single category's labels attached.
    pub fn collection(&self, tokenizer: &TokenizerConfig) -> Result<LabeledCollection, CorpusError> {
        let docs = self.docs.iter().map(|d| Document::new(d.doc_id.clone(), d.text.clone(), tokenizer)).collect();
        let mut collection = LabeledCollection::from_documents(docs)?;
        let mut qrels = Vec::new();
        self.write_qrels(&mut qrels).expect("writing to memory");
        collection.attach_labels(qrels.as_slice())?;
        Ok(collection)
    }

    /// Learned-sparse matrix in document order.
    pub fn vector_matrix(&self) -> Result<SparseMatrix, FeatureError> {
        let rows = self
            .docs
            .iter()
            .map(|d| d.vector.clone().ok_or_else(|| FeatureError::MissingVector(d.doc_id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        SparseMatrix::from_rows(FeatureFamily::Splade, self.vector_vocab, rows)
    }

    pub fn write_corpus<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in &self.docs {
            serde_json::to_writer(&mut w, &CorpusLine { doc_id: &d.doc_id, text: &d.text })?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    /// Three-column qrels covering every document.
    pub fn write_qrels<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in &self.docs {
            writeln!(w, "{} {} {}", self.category_id, d.doc_id, u8::from(self.relevant.contains(&d.doc_id)))?;
        }
        w.flush()
    }

    /// Vectors in the interchange JSONL format. Documents without a vector
    /// are skipped.
    pub fn write_vectors<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in &self.docs {
            let Some(v) = &d.vector else { continue };
            let vector =
                v.entries.iter().map(|&(i, x)| (i.to_string(), serde_json::Value::from(f64::from(x)))).collect();
            serde_json::to_writer(&mut w, &VectorLine { doc_id: &d.doc_id, vector })?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

// Skewed background draw: low indices are common words.
fn background_token<R: Rng>(rng: &mut R, vocab: usize) -> String {
    let u: f64 = rng.random();
    format!("w{}", ((u * u) * vocab as f64) as usize)
}

fn sig_token(i: usize) -> String {
    format!("sig{i}")
}

fn text_doc<R: Rng>(rng: &mut R, spec: &SignatureSpec, planted: bool) -> String {
    let len = rng.random_range(spec.min_doc_len..=spec.max_doc_len.max(spec.min_doc_len));
    let mut tokens: Vec<String> = (0..len).map(|_| background_token(rng, spec.background_vocab)).collect();
    if planted {
        let k = spec.signature_per_doc.min(spec.signature_tokens);
        for i in rand::seq::index::sample(rng, spec.signature_tokens, k) {
            for _ in 0..rng.random_range(1..=3) {
                let at = rng.random_range(0..=tokens.len());
                tokens.insert(at, sig_token(i));
            }
        }
    } else {
        for i in 0..spec.signature_tokens {
            if rng.random_bool(spec.noise) {
                let at = rng.random_range(0..=tokens.len());
                tokens.insert(at, sig_token(i));
            }
        }
    }
    tokens.join(" ")
}

fn relevant_rows<R: Rng>(rng: &mut R, spec: &SignatureSpec) -> BTreeSet<usize> {
    assert!(spec.n_relevant < spec.n_docs, "need at least one non-relevant document");
    rand::seq::index::sample(rng, spec.n_docs, spec.n_relevant).into_iter().collect()
}

fn doc_id(i: usize) -> String {
    format!("doc{i:05}")
}

/// Relevant documents carry a few signature tokens; some non-relevant ones
/// carry stray signature tokens.
pub fn signature_corpus(spec: &SignatureSpec) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rows = relevant_rows(&mut rng, spec);
    let docs = (0..spec.n_docs)
        .map(|i| SyntheticDoc { doc_id: doc_id(i), text: text_doc(&mut rng, spec, rows.contains(&i)), vector: None })
        .collect();
    SyntheticCorpus {
        category_id: "synthetic".into(),
        docs,
        relevant: rows.into_iter().map(doc_id).collect(),
        vector_vocab: 0,
    }
}

/// Vector signature dimensions sit at the top of the vocabulary, away from
/// the skewed background.
fn vector_doc<R: Rng>(rng: &mut R, spec: &ComplementarySpec, planted: bool) -> SparseVector {
    let n_sig = spec.text.signature_tokens;
    let background = spec.vector_vocab - n_sig;
    let mut entries: Vec<(u32, f32)> = rand::seq::index::sample(rng, background, spec.vector_nnz.min(background))
        .into_iter()
        .map(|i| (i as u32, rng.random_range(0.05f32..1.5)))
        .collect();
    let sig = |i: usize| (background + i) as u32;
    if planted {
        let k = spec.text.signature_per_doc.min(n_sig);
        for i in rand::seq::index::sample(rng, n_sig, k) {
            entries.push((sig(i), rng.random_range(1.0f32..2.5)));
        }
    } else {
        for i in 0..n_sig {
            if rng.random_bool(spec.text.noise) {
                entries.push((sig(i), rng.random_range(0.05f32..1.0)));
            }
        }
    }
    SparseVector::from_unsorted(entries)
}

/// Relevant documents are split into text-only, vector-only and both.
pub fn complementary_corpus(spec: &ComplementarySpec) -> SyntheticCorpus {
    assert!(spec.vector_vocab > spec.text.signature_tokens, "vector vocabulary too small");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.text.seed);
    let rows = relevant_rows(&mut rng, &spec.text);
    let single = (spec.single_family_fraction * rows.len() as f64).round() as usize;
    let mut docs = Vec::with_capacity(spec.text.n_docs);
    let mut rank = 0;
    for i in 0..spec.text.n_docs {
        let (in_text, in_vector) = if rows.contains(&i) {
            rank += 1;
            // rows is a uniform sample, so rank order is unrelated to content
            match rank {
                r if r <= single => (true, false),
                r if r <= 2 * single => (false, true),
                _ => (true, true),
            }
        } else {
            (false, false)
        };
        let text = text_doc(&mut rng, &spec.text, in_text);
        let vector = vector_doc(&mut rng, spec, in_vector);
        docs.push(SyntheticDoc { doc_id: doc_id(i), text, vector: Some(vector) });
    }
    SyntheticCorpus {
        category_id: "synthetic".into(),
        docs,
        relevant: rows.into_iter().map(doc_id).collect(),
        vector_vocab: spec.vector_vocab,
    }
}
