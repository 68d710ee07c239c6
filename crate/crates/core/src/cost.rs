//! Review cost metrics computed from run records.
//!
//! The cost of stopping a run at iteration `t` is split into four sectors:
//! relevant and non-relevant documents reviewed in phase one through `t`,
//! and relevant and non-relevant documents a second-phase reviewer reads
//! down the ranking produced at `t` until the recall target is met. Each
//! sector is a document count times its unit cost.
//!
//! One-phase runs have no second phase and are costed at their stopping
//! iteration. Two-phase runs are costed at the iteration that minimizes the
//! total ("optimal cost").

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workflow::{RunRecord, Workflow};

/// Phase-one unit cost multiplier of the expensive-training structure.
pub const TRAINING_COST_MULTIPLIER: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("iteration {iteration} out of range (record has {len})")]
    IterationOutOfRange { iteration: usize, len: usize },
    #[error("record has no iterations")]
    EmptyRecord,
    #[error("two-phase record lacks a second-phase depth at iteration {0}")]
    MissingDepth(usize),
    #[error("one-phase run for {category} stopped before reaching the recall target")]
    TargetNotReached { category: String },
    #[error("run ({category}, seed set {seed_set}) has no paired {side} run")]
    Unpaired { category: String, seed_set: u32, side: &'static str },
    #[error("baseline cost for {category} must be positive")]
    NonPositiveBaseline { category: String },
    #[error("no runs to compare")]
    NoRuns,
    #[error("invalid cost structure: {0}")]
    InvalidStructure(String),
}

/// Unit review costs per phase and relevance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostStructure {
    pub phase1_pos: f64,
    pub phase1_neg: f64,
    pub phase2_pos: f64,
    pub phase2_neg: f64,
}

impl CostStructure {
    /// Every review costs the same.
    pub fn uniform() -> Self {
        Self { phase1_pos: 1.0, phase1_neg: 1.0, phase2_pos: 1.0, phase2_neg: 1.0 }
    }

    /// Training (phase-one) reviews cost ten times a phase-two review.
    pub fn expensive_training() -> Self {
        Self {
            phase1_pos: TRAINING_COST_MULTIPLIER,
            phase1_neg: TRAINING_COST_MULTIPLIER,
            phase2_pos: 1.0,
            phase2_neg: 1.0,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            phase1_pos: self.phase1_pos * factor,
            phase1_neg: self.phase1_neg * factor,
            phase2_pos: self.phase2_pos * factor,
            phase2_neg: self.phase2_neg * factor,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let all = [self.phase1_pos, self.phase1_neg, self.phase2_pos, self.phase2_neg];
        if all.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(CostError::InvalidStructure(format!("unit costs must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Named presets accepted in configs and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostSpec {
    Preset(CostPreset),
    Custom(CostStructure),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostPreset {
    Uniform,
    ExpensiveTraining,
}

impl CostSpec {
    pub fn structure(&self) -> CostStructure {
        match self {
            CostSpec::Preset(CostPreset::Uniform) => CostStructure::uniform(),
            CostSpec::Preset(CostPreset::ExpensiveTraining) => CostStructure::expensive_training(),
            CostSpec::Custom(cs) => *cs,
        }
    }
}

/// Cost of stopping at one iteration, by sector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub iteration: usize,
    pub p1_pos: f64,
    pub p1_neg: f64,
    pub p2_pos: f64,
    pub p2_neg: f64,
    pub total: f64,
    /// Phase one alone already meets the target here.
    pub depth_zero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostDynamics {
    pub entries: Vec<CostEntry>,
}

impl CostDynamics {
    /// First iteration needing no second-phase review.
    pub fn first_depth_zero(&self) -> Option<usize> {
        self.entries.iter().find(|e| e.depth_zero).map(|e| e.iteration)
    }

    /// `iteration,p1_pos,p1_neg,p2_pos,p2_neg,total,depth_zero_flag`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "p1_pos", "p1_neg", "p2_pos", "p2_neg", "total", "depth_zero_flag"])?;
        for e in &self.entries {
            out.write_record([
                e.iteration.to_string(),
                e.p1_pos.to_string(),
                e.p1_neg.to_string(),
                e.p2_pos.to_string(),
                e.p2_neg.to_string(),
                e.total.to_string(),
                u8::from(e.depth_zero).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn iteration_cost(record: &RunRecord, iteration: usize, cs: &CostStructure) -> Result<CostEntry, CostError> {
    let it = record
        .iterations
        .get(iteration)
        .ok_or(CostError::IterationOutOfRange { iteration, len: record.iterations.len() })?;
    let p1_pos_docs = it.cumulative_positives as f64;
    let p1_neg_docs = (it.cumulative_reviewed - it.cumulative_positives) as f64;
    let (p2_pos_docs, p2_neg_docs, depth_zero) = match record.workflow() {
        Workflow::OnePhase => (0.0, 0.0, it.cumulative_positives >= record.header.required_positives),
        Workflow::TwoPhase => {
            let depth = it.second_phase_depth.ok_or(CostError::MissingDepth(iteration))?;
            let pos = it.second_phase_positives.ok_or(CostError::MissingDepth(iteration))?;
            (pos as f64, (depth - pos) as f64, depth == 0)
        }
    };
    let p1_pos = p1_pos_docs * cs.phase1_pos;
    let p1_neg = p1_neg_docs * cs.phase1_neg;
    let p2_pos = p2_pos_docs * cs.phase2_pos;
    let p2_neg = p2_neg_docs * cs.phase2_neg;
    Ok(CostEntry { iteration, p1_pos, p1_neg, p2_pos, p2_neg, total: p1_pos + p1_neg + p2_pos + p2_neg, depth_zero })
}

/// Lowest total cost over the run and the earliest iteration achieving it.
pub fn optimal_cost(record: &RunRecord, cs: &CostStructure) -> Result<(f64, usize), CostError> {
    let last = record.iterations.len().checked_sub(1).ok_or(CostError::EmptyRecord)?;
    match record.workflow() {
        Workflow::OnePhase => {
            if !record.header.target_reached {
                return Err(CostError::TargetNotReached { category: record.header.category_id.clone() });
            }
            Ok((iteration_cost(record, last, cs)?.total, last))
        }
        Workflow::TwoPhase => {
            let mut best: Option<(f64, usize)> = None;
            for i in 0..=last {
                let total = iteration_cost(record, i, cs)?.total;
                if best.is_none_or(|(b, _)| total < b) {
                    best = Some((total, i));
                }
            }
            Ok(best.expect("non-empty record"))
        }
    }
}

pub fn cost_dynamics_table(record: &RunRecord, cs: &CostStructure) -> Result<CostDynamics, CostError> {
    let entries = (0..record.iterations.len()).map(|i| iteration_cost(record, i, cs)).collect::<Result<Vec<_>, _>>()?;
    Ok(CostDynamics { entries })
}

/// Optimal cost of one run, keyed for pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCost {
    pub category: String,
    pub seed_set: u32,
    pub cost: f64,
}

fn by_category(costs: &[RunCost]) -> BTreeMap<&str, BTreeMap<u32, f64>> {
    let mut out: BTreeMap<&str, BTreeMap<u32, f64>> = BTreeMap::new();
    for c in costs {
        out.entry(c.category.as_str()).or_default().insert(c.seed_set, c.cost);
    }
    out
}

/// Per-category ratios of mean method cost to mean baseline cost.
pub fn category_ratios(run_costs: &[RunCost], baseline_costs: &[RunCost]) -> Result<BTreeMap<String, f64>, CostError> {
    let runs = by_category(run_costs);
    let base = by_category(baseline_costs);
    let unpaired =
        |category: &str, seed_set: u32, side| CostError::Unpaired { category: category.to_string(), seed_set, side };
    for (cat, seeds) in &base {
        for seed in seeds.keys() {
            if !runs.get(cat).is_some_and(|r| r.contains_key(seed)) {
                return Err(unpaired(cat, *seed, "method"));
            }
        }
    }
    let mut ratios = BTreeMap::new();
    for (cat, seeds) in &runs {
        let base_seeds = base.get(cat);
        for seed in seeds.keys() {
            if !base_seeds.is_some_and(|b| b.contains_key(seed)) {
                return Err(unpaired(cat, *seed, "baseline"));
            }
        }
        let base_seeds = base_seeds.expect("checked above");
        let mean = |m: &BTreeMap<u32, f64>| m.values().sum::<f64>() / m.len() as f64;
        let base_mean = mean(base_seeds);
        if !(base_mean > 0.0) {
            return Err(CostError::NonPositiveBaseline { category: cat.to_string() });
        }
        ratios.insert(cat.to_string(), mean(seeds) / base_mean);
    }
    Ok(ratios)
}

/// Macro average over categories of `mean(run) / mean(baseline)`, runs paired
/// by `(category, seed_set)`.
pub fn relative_cost(run_costs: &[RunCost], baseline_costs: &[RunCost]) -> Result<f64, CostError> {
    let ratios = category_ratios(run_costs, baseline_costs)?;
    if ratios.is_empty() {
        return Err(CostError::NoRuns);
    }
    Ok(ratios.values().sum::<f64>() / ratios.len() as f64)
}
