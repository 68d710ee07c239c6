//! One simulated review run for one category.
//!
//! A run starts by revealing one relevant and one non-relevant seed
//! document. Each later iteration retrains the classifier(s) on everything
//! reviewed so far, scores the unreviewed documents, samples a batch and
//! reveals its gold labels. A one-phase run stops as soon as the true recall
//! reaches the target. A two-phase run additionally records, for every
//! iteration, how deep a second-phase reviewer would have to go down the
//! current ranking to reach the target; the cost module turns that into the
//! optimal stopping point after the fact.

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{predict_proba, train_from, ClassifierError, LogRegConfig, LogRegModel};
use crate::corpus::{CategoryLabels, LabeledCollection};
use crate::features::SparseMatrix;
use crate::sampling::{by_score_desc, select_batch, Strategy, DEFAULT_BATCH_SIZE};

/// Default recall target for oracle stopping.
pub const DEFAULT_RECALL_TARGET: f64 = 0.8;

/// Iteration cap applied to two-phase runs unless overridden.
pub const DEFAULT_TWO_PHASE_MAX_ITERATIONS: usize = 200;

/// Replicate seed sets per category.
pub const DEFAULT_SEED_SETS: u32 = 10;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("category {category}: no eligible {kind} seed document")]
    NoEligibleSeed { category: String, kind: &'static str },
    #[error("feature mode {0} needs a matrix that was not provided")]
    MissingFeatures(FeatureMode),
    #[error("matrix has {matrix} rows but the collection has {collection} documents")]
    RowCountMismatch { matrix: usize, collection: usize },
    #[error("probability vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("malformed run record: {0}")]
    MalformedRecord(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workflow {
    OnePhase,
    TwoPhase,
}

impl Workflow {
    /// Sampling strategy each workflow is paired with unless overridden.
    pub fn default_strategy(self) -> Strategy {
        match self {
            Workflow::OnePhase => Strategy::Relevance,
            Workflow::TwoPhase => Strategy::Uncertainty,
        }
    }
}

impl fmt::Display for Workflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Workflow::OnePhase => "one_phase",
            Workflow::TwoPhase => "two_phase",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Bm25,
    Splade,
    /// One model per family; predicted probabilities averaged.
    Fused,
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::Bm25 => "bm25",
            FeatureMode::Splade => "splade",
            FeatureMode::Fused => "fused",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub workflow: Workflow,
    pub strategy: Strategy,
    pub feature_mode: FeatureMode,
    pub recall_target: f64,
    pub batch_size: usize,
    /// Sampling iterations after the seeds; `None` runs until the target is met.
    pub max_iterations: Option<usize>,
    pub seed_set_id: u32,
    pub rng_seed: u64,
    pub classifier: LogRegConfig,
    pub warm_start: bool,
}

impl RunConfig {
    pub fn new(workflow: Workflow, feature_mode: FeatureMode) -> Self {
        Self {
            workflow,
            strategy: workflow.default_strategy(),
            feature_mode,
            recall_target: DEFAULT_RECALL_TARGET,
            batch_size: DEFAULT_BATCH_SIZE,
            max_iterations: match workflow {
                Workflow::OnePhase => None,
                Workflow::TwoPhase => Some(DEFAULT_TWO_PHASE_MAX_ITERATIONS),
            },
            seed_set_id: 0,
            rng_seed: 0,
            classifier: LogRegConfig::default(),
            warm_start: false,
        }
    }

    fn validate(&self) -> Result<(), WorkflowError> {
        if !(self.recall_target > 0.0 && self.recall_target <= 1.0) {
            return Err(WorkflowError::InvalidConfig(format!(
                "recall_target must be in (0, 1], got {}",
                self.recall_target
            )));
        }
        if self.batch_size == 0 {
            return Err(WorkflowError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Smallest count `c` with `c / total >= target`.
pub fn required_positives(total: usize, target: f64) -> usize {
    if total == 0 {
        return 0;
    }
    let n = total as f64;
    let mut c = ((target * n).ceil().max(0.0) as usize).min(total);
    while c > 0 && (c - 1) as f64 / n >= target {
        c -= 1;
    }
    while c < total && (c as f64 / n) < target {
        c += 1;
    }
    c
}

/// 32 bytes derived from `(domain, base_seed, category, seed_set)`.
fn derive_seed(domain: &str, base_seed: u64, category_id: &str, seed_set_id: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0]);
    h.update(base_seed.to_le_bytes());
    h.update(category_id.as_bytes());
    h.update([0]);
    h.update(seed_set_id.to_le_bytes());
    h.finalize().into()
}

/// RNG used to draw the seed documents of one replicate. It depends only on
/// the category and replicate, never on feature mode or workflow.
pub fn seed_rng(base_seed: u64, category_id: &str, seed_set_id: u32) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed("seed-documents", base_seed, category_id, seed_set_id))
}

/// Seed for the sampling RNG of one run.
pub fn sampling_seed(base_seed: u64, category_id: &str, seed_set_id: u32) -> u64 {
    let bytes = derive_seed("sampling", base_seed, category_id, seed_set_id);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPair {
    pub positive: usize,
    pub negative: usize,
}

/// Draws one relevant and one non-relevant document uniformly among the
/// documents with at least one token.
pub fn select_seeds<R: Rng + ?Sized>(
    collection: &LabeledCollection,
    category: &CategoryLabels,
    rng: &mut R,
) -> Result<SeedPair, WorkflowError> {
    let eligible = |row: &usize| collection.documents[*row].length() > 0;
    let positives: Vec<usize> = category.positives.iter().copied().filter(eligible).collect();
    let negatives: Vec<usize> = (0..collection.len()).filter(|r| !category.is_positive(*r)).filter(eligible).collect();
    let no_seed = |kind| WorkflowError::NoEligibleSeed { category: category.category_id.clone(), kind };
    if positives.is_empty() {
        return Err(no_seed("relevant"));
    }
    if negatives.is_empty() {
        return Err(no_seed("non-relevant"));
    }
    let positive = positives[rng.random_range(0..positives.len())];
    let negative = negatives[rng.random_range(0..negatives.len())];
    Ok(SeedPair { positive, negative })
}

/// The replicate seed sets of one category, shared by every feature mode and
/// workflow run on it.
pub fn seed_sets(
    collection: &LabeledCollection,
    category: &CategoryLabels,
    base_seed: u64,
    count: u32,
) -> Result<Vec<SeedPair>, WorkflowError> {
    (0..count)
        .map(|id| select_seeds(collection, category, &mut seed_rng(base_seed, &category.category_id, id)))
        .collect()
}

/// Elementwise mean of two aligned probability vectors.
pub fn fuse_scores(p1: &[f64], p2: &[f64]) -> Result<Vec<f64>, WorkflowError> {
    if p1.len() != p2.len() {
        return Err(WorkflowError::LengthMismatch(p1.len(), p2.len()));
    }
    Ok(p1.iter().zip(p2).map(|(a, b)| (a + b) / 2.0).collect())
}

/// How far down the ranking a second-phase review has to go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecondPhase {
    /// Documents reviewed in the second phase.
    pub depth: usize,
    /// Relevant documents among them.
    pub positives: usize,
}

/// Shortest prefix of `scored` (ranked by descending score, ties by row) that
/// lifts recall from `found` to the target. Depth is 0 when `found` already
/// meets it; `None` when even the whole ranking falls short.
pub fn rank_depth_to_target(
    scored: &[(usize, f64)],
    found: usize,
    total_positives: usize,
    target: f64,
    is_positive: impl Fn(usize) -> bool,
) -> Option<SecondPhase> {
    let required = required_positives(total_positives, target);
    if found >= required {
        return Some(SecondPhase { depth: 0, positives: 0 });
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(by_score_desc);
    let mut positives = 0;
    for (depth, &(row, _)) in ranked.iter().enumerate() {
        if is_positive(row) {
            positives += 1;
            if found + positives >= required {
                return Some(SecondPhase { depth: depth + 1, positives });
            }
        }
    }
    None
}

/// Feature matrices available to a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureSet<'a> {
    pub bm25: Option<&'a SparseMatrix>,
    pub splade: Option<&'a SparseMatrix>,
}

impl<'a> FeatureSet<'a> {
    fn matrices(&self, mode: FeatureMode) -> Result<Vec<&'a SparseMatrix>, WorkflowError> {
        let need = |m: Option<&'a SparseMatrix>| m.ok_or(WorkflowError::MissingFeatures(mode));
        Ok(match mode {
            FeatureMode::Bm25 => vec![need(self.bm25)?],
            FeatureMode::Splade => vec![need(self.splade)?],
            FeatureMode::Fused => vec![need(self.bm25)?, need(self.splade)?],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewedDoc {
    pub row: usize,
    pub relevant: bool,
    pub iteration: usize,
}

/// Mutable review progress of one run.
#[derive(Debug, Clone)]
pub struct ReviewState {
    reviewed: Vec<ReviewedDoc>,
    is_reviewed: Vec<bool>,
    found_relevant: usize,
}

impl ReviewState {
    pub fn new(n_docs: usize) -> Self {
        Self { reviewed: Vec::new(), is_reviewed: vec![false; n_docs], found_relevant: 0 }
    }

    pub fn reveal(&mut self, row: usize, relevant: bool, iteration: usize) {
        assert!(!self.is_reviewed[row], "document {row} reviewed twice");
        self.is_reviewed[row] = true;
        self.found_relevant += usize::from(relevant);
        self.reviewed.push(ReviewedDoc { row, relevant, iteration });
    }

    pub fn reviewed(&self) -> &[ReviewedDoc] {
        &self.reviewed
    }

    pub fn found_relevant(&self) -> usize {
        self.found_relevant
    }

    pub fn is_reviewed(&self, row: usize) -> bool {
        self.is_reviewed[row]
    }

    /// Unreviewed rows in ascending order.
    pub fn unreviewed(&self) -> Vec<usize> {
        (0..self.is_reviewed.len()).filter(|&r| !self.is_reviewed[r]).collect()
    }

    /// Reviewed rows and labels in ascending row order.
    pub fn training_set(&self) -> (Vec<usize>, Vec<bool>) {
        let mut docs: Vec<(usize, bool)> = self.reviewed.iter().map(|d| (d.row, d.relevant)).collect();
        docs.sort_unstable_by_key(|d| d.0);
        docs.into_iter().unzip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    /// Every document was reviewed.
    Exhausted,
    /// Iteration cap hit before the target.
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub category_id: String,
    pub config: RunConfig,
    pub seed_docs: [String; 2],
    pub collection_size: usize,
    pub total_positives: usize,
    pub required_positives: usize,
    pub stop_reason: StopReason,
    pub target_reached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub batch: Vec<String>,
    pub batch_positives: usize,
    pub cumulative_reviewed: usize,
    pub cumulative_positives: usize,
    /// Second-phase review depth under this iteration's ranking (two-phase only).
    pub second_phase_depth: Option<usize>,
    pub second_phase_positives: Option<usize>,
}

/// Everything a run did, enough to compute any cost metric afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub header: RunHeader,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum RecordLine {
    Header(RunHeader),
    Iteration(IterationRecord),
}

impl RunRecord {
    pub fn workflow(&self) -> Workflow {
        self.header.config.workflow
    }

    /// Header line followed by one line per iteration.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), WorkflowError> {
        let header = RecordLine::Header(self.header.clone());
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for it in &self.iterations {
            serde_json::to_writer(&mut w, &RecordLine::Iteration(it.clone())).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, WorkflowError> {
        let mut header = None;
        let mut iterations = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(&line)
                .map_err(|e| WorkflowError::MalformedRecord(format!("line {}: {e}", i + 1)))?;
            match parsed {
                RecordLine::Header(h) if header.is_none() && i == 0 => header = Some(h),
                RecordLine::Header(_) => {
                    return Err(WorkflowError::MalformedRecord(format!("line {}: unexpected header", i + 1)))
                }
                RecordLine::Iteration(it) => iterations.push(it),
            }
        }
        let header = header.ok_or_else(|| WorkflowError::MalformedRecord("missing header line".into()))?;
        Ok(Self { header, iterations })
    }
}

/// Scores every unreviewed row with freshly trained model(s).
struct Scorer<'a> {
    matrices: Vec<&'a SparseMatrix>,
    previous: Vec<Option<LogRegModel>>,
    config: LogRegConfig,
    warm_start: bool,
}

impl Scorer<'_> {
    fn score(&mut self, state: &ReviewState, unreviewed: &[usize]) -> Result<Vec<(usize, f64)>, WorkflowError> {
        let (rows, labels) = state.training_set();
        let mut probabilities: Option<Vec<f64>> = None;
        for (matrix, previous) in self.matrices.iter().zip(self.previous.iter_mut()) {
            let init = if self.warm_start { previous.as_ref() } else { None };
            let model = train_from(matrix, &rows, &labels, &self.config, init)?;
            if !model.diagnostics.converged {
                log::debug!(
                    "solver stopped at gradient max-norm {:.3e} after {} iterations",
                    model.diagnostics.gradient_max_norm,
                    model.diagnostics.iterations
                );
            }
            let p = predict_proba(&model, matrix, unreviewed)?;
            probabilities = Some(match probabilities {
                None => p,
                Some(first) => fuse_scores(&first, &p)?,
            });
            *previous = Some(model);
        }
        let probabilities = probabilities.expect("at least one matrix");
        Ok(unreviewed.iter().copied().zip(probabilities).collect())
    }
}

/// Runs one review simulation.
pub fn run_tar(
    config: &RunConfig,
    collection: &LabeledCollection,
    category: &CategoryLabels,
    seeds: SeedPair,
    features: &FeatureSet<'_>,
) -> Result<RunRecord, WorkflowError> {
    config.validate()?;
    let matrices = features.matrices(config.feature_mode)?;
    for m in &matrices {
        if m.n_rows() != collection.len() {
            return Err(WorkflowError::RowCountMismatch { matrix: m.n_rows(), collection: collection.len() });
        }
    }
    if !category.is_positive(seeds.positive) || category.is_positive(seeds.negative) {
        return Err(WorkflowError::InvalidConfig("seed pair does not match the category labels".into()));
    }

    let total_positives = category.total_positives();
    let required = required_positives(total_positives, config.recall_target);
    let two_phase = config.workflow == Workflow::TwoPhase;
    let needs_model = two_phase || config.strategy != Strategy::Random;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut scorer = Scorer {
        previous: vec![None; matrices.len()],
        matrices,
        config: config.classifier,
        warm_start: config.warm_start,
    };

    let mut state = ReviewState::new(collection.len());
    let mut iterations = Vec::new();
    let reveal_batch = |state: &mut ReviewState, batch: &[usize], iteration: usize| {
        let mut batch_positives = 0;
        for &row in batch {
            let relevant = category.is_positive(row);
            batch_positives += usize::from(relevant);
            state.reveal(row, relevant, iteration);
        }
        IterationRecord {
            iteration,
            batch: batch.iter().map(|&r| collection.doc_id(r).to_string()).collect(),
            batch_positives,
            cumulative_reviewed: state.reviewed().len(),
            cumulative_positives: state.found_relevant(),
            second_phase_depth: None,
            second_phase_positives: None,
        }
    };
    iterations.push(reveal_batch(&mut state, &[seeds.positive, seeds.negative], 0));

    let stop_reason = loop {
        let current = iterations.len() - 1;
        let met = state.found_relevant() >= required;
        if met {
            if two_phase {
                let last: &mut IterationRecord = iterations.last_mut().expect("seed iteration");
                last.second_phase_depth = Some(0);
                last.second_phase_positives = Some(0);
            }
            break StopReason::TargetReached;
        }
        let unreviewed = state.unreviewed();
        if unreviewed.is_empty() {
            break StopReason::Exhausted;
        }
        let scored = if needs_model {
            scorer.score(&state, &unreviewed)?
        } else {
            unreviewed.iter().map(|&r| (r, 0.0)).collect()
        };
        if two_phase {
            let phase2 =
                rank_depth_to_target(&scored, state.found_relevant(), total_positives, config.recall_target, |r| {
                    category.is_positive(r)
                });
            let last = iterations.last_mut().expect("seed iteration");
            last.second_phase_depth = phase2.map(|p| p.depth);
            last.second_phase_positives = phase2.map(|p| p.positives);
        }
        if config.max_iterations.is_some_and(|cap| current >= cap) {
            break StopReason::MaxIterations;
        }
        let batch = select_batch(config.strategy, &scored, config.batch_size, &mut rng);
        iterations.push(reveal_batch(&mut state, &batch, current + 1));
    };

    let header = RunHeader {
        category_id: category.category_id.clone(),
        config: *config,
        seed_docs: [collection.doc_id(seeds.positive).to_string(), collection.doc_id(seeds.negative).to_string()],
        collection_size: collection.len(),
        total_positives,
        required_positives: required,
        stop_reason,
        target_reached: state.found_relevant() >= required,
    };
    Ok(RunRecord { header, iterations })
}
