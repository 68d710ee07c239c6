//! Review batch selection.
//!
//! All strategies break ties by document row index so that batches, and
//! therefore whole runs, are reproducible.

use std::cmp::Ordering;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Default number of documents reviewed per iteration.
pub const DEFAULT_BATCH_SIZE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Highest predicted relevance first.
    Relevance,
    /// Predicted probability closest to 0.5 first.
    Uncertainty,
    /// Uniform without replacement.
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Relevance => "relevance",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Random => "random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl BatchRequest {
    pub fn new(strategy: Strategy) -> Self {
        Self { strategy, batch_size: DEFAULT_BATCH_SIZE, rng_seed: 0 }
    }
}

/// `(row, score)` ordering by descending score, then ascending row.
pub(crate) fn by_score_desc(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn top_k_by(scored: &[(usize, f64)], k: usize, cmp: impl Fn(&(usize, f64), &(usize, f64)) -> Ordering) -> Vec<usize> {
    let mut ranked = scored.to_vec();
    let k = k.min(ranked.len());
    if k == 0 {
        return Vec::new();
    }
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, &cmp);
        ranked.truncate(k);
    }
    ranked.sort_by(&cmp);
    ranked.into_iter().map(|(row, _)| row).collect()
}

/// The `k` unreviewed rows with the highest score, ordered by
/// `(-score, row)`.
pub fn select_relevance(scored: &[(usize, f64)], k: usize) -> Vec<usize> {
    top_k_by(scored, k, by_score_desc)
}

/// The `k` unreviewed rows with score closest to 0.5, ordered by
/// `(|p - 0.5|, row)`.
pub fn select_uncertainty(scored: &[(usize, f64)], k: usize) -> Vec<usize> {
    top_k_by(scored, k, |a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()).then(a.0.cmp(&b.0)))
}

/// Uniform sample of `k` rows without replacement, in draw order.
pub fn select_random<R: Rng + ?Sized>(unreviewed: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let mut pool = unreviewed.to_vec();
    let k = k.min(pool.len());
    let (chosen, _) = pool.partial_shuffle(rng, k);
    chosen.to_vec()
}

/// Dispatches on `strategy`. `scored` must list every unreviewed row once;
/// the random strategy ignores the scores.
pub fn select_batch<R: Rng + ?Sized>(strategy: Strategy, scored: &[(usize, f64)], k: usize, rng: &mut R) -> Vec<usize> {
    match strategy {
        Strategy::Relevance => select_relevance(scored, k),
        Strategy::Uncertainty => select_uncertainty(scored, k),
        Strategy::Random => {
            let rows: Vec<usize> = scored.iter().map(|&(row, _)| row).collect();
            select_random(&rows, k, rng)
        }
    }
}
