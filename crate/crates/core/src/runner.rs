//! Experiment grids: configuration, parallel execution with a resumable
//! manifest, relative-cost reports and cost-dynamics charts.
//!
//! A run directory holds `manifest.json`, one record per run under `runs/`,
//! and whatever `aggregate` and `emit_dynamics` write next to them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::LogRegConfig;
use crate::corpus::{self, CategoryGroup, CorpusError, Difficulty, LabeledCollection, Prevalence, TokenizerConfig};
use crate::cost::{
    category_ratios, cost_dynamics_table, optimal_cost, CostDynamics, CostError, CostSpec, CostStructure, RunCost,
};
use crate::features::{self, Bm25Params, FeatureError, FeatureFamily, SparseMatrix, SpladeOptions};
use crate::sampling::{Strategy, DEFAULT_BATCH_SIZE};
use crate::workflow::{
    run_tar, sampling_seed, seed_sets, FeatureMode, FeatureSet, RunConfig, RunRecord, SeedPair, Workflow,
    WorkflowError, DEFAULT_RECALL_TARGET, DEFAULT_SEED_SETS, DEFAULT_TWO_PHASE_MAX_ITERATIONS,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUNS_DIR: &str = "runs";
pub const DYNAMICS_DIR: &str = "dynamics";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{field}: {path} does not exist")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("run directory was created by config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("no run matches {0:?}")]
    NoMatchingRun(String),
    #[error("{selector:?} matches several runs: {matches:?}")]
    AmbiguousRun { selector: String, matches: Vec<String> },
    #[error("run {0} is one-phase; cost dynamics need a two-phase run")]
    NotTwoPhase(String),
    #[error("no {mode} baseline runs for workflow {workflow}")]
    MissingBaseline { workflow: String, mode: FeatureMode },
    #[error("run {run_id}: {source}")]
    RunCost { run_id: String, source: CostError },
    #[error("chart rendering failed: {0}")]
    Chart(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.to_path_buf(), source }
}

/// One workflow arm of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    pub workflow: Workflow,
    /// Defaults to relevance for one-phase and uncertainty for two-phase.
    #[serde(default)]
    pub strategy: Option<Strategy>,
    /// Defaults to uniform for one-phase and expensive training for two-phase.
    #[serde(default)]
    pub cost: Option<CostSpec>,
    /// Defaults to unlimited for one-phase and 200 for two-phase.
    #[serde(default)]
    pub max_iterations: Option<usize>,
    /// Report and run-id label; derived from the other fields when absent.
    #[serde(default)]
    pub label: Option<String>,
}

impl WorkflowSpec {
    pub fn new(workflow: Workflow) -> Self {
        Self { workflow, strategy: None, cost: None, max_iterations: None, label: None }
    }

    pub fn resolve(&self) -> ResolvedWorkflow {
        let strategy = self.strategy.unwrap_or(self.workflow.default_strategy());
        let cost = match (&self.cost, self.workflow) {
            (Some(spec), _) => spec.structure(),
            (None, Workflow::OnePhase) => CostStructure::uniform(),
            (None, Workflow::TwoPhase) => CostStructure::expensive_training(),
        };
        let max_iterations = self.max_iterations.or(match self.workflow {
            Workflow::OnePhase => None,
            Workflow::TwoPhase => Some(DEFAULT_TWO_PHASE_MAX_ITERATIONS),
        });
        let label =
            self.label.clone().unwrap_or_else(|| format!("{}-{}-{}", self.workflow, strategy, cost_name(&cost)));
        ResolvedWorkflow { workflow: self.workflow, strategy, cost, max_iterations, label }
    }
}

fn cost_name(cs: &CostStructure) -> String {
    if *cs == CostStructure::uniform() {
        "uniform".into()
    } else if *cs == CostStructure::expensive_training() {
        "expensive_training".into()
    } else {
        format!("custom_{}_{}_{}_{}", cs.phase1_pos, cs.phase1_neg, cs.phase2_pos, cs.phase2_neg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedWorkflow {
    pub workflow: Workflow,
    pub strategy: Strategy,
    pub cost: CostStructure,
    pub max_iterations: Option<usize>,
    pub label: String,
}

fn default_schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}
fn default_feature_modes() -> Vec<FeatureMode> {
    vec![FeatureMode::Bm25]
}
fn default_workflows() -> Vec<WorkflowSpec> {
    vec![WorkflowSpec::new(Workflow::OnePhase), WorkflowSpec::new(Workflow::TwoPhase)]
}
fn default_recall_target() -> f64 {
    DEFAULT_RECALL_TARGET
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_seed_sets() -> u32 {
    DEFAULT_SEED_SETS
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("tar-runs")
}

/// The whole experiment as one JSON document. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Corpus JSONL, one `{"doc_id", "text"}` per line.
    pub corpus: PathBuf,
    /// qrels: `category_id doc_id relevance`, optionally TREC 4-column.
    pub labels: PathBuf,
    /// `category_id,difficulty,prevalence` CSV.
    #[serde(default)]
    pub groups: Option<PathBuf>,
    #[serde(default)]
    pub splade_vectors: Option<PathBuf>,
    /// Binary BM25 matrix written by `encode-bm25`; encoded on the fly when absent.
    #[serde(default)]
    pub bm25_cache: Option<PathBuf>,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub bm25: Bm25Params,
    #[serde(default)]
    pub splade: SpladeOptions,
    /// Restrict the grid to these categories.
    #[serde(default)]
    pub categories: Option<Vec<String>>,
    #[serde(default = "default_feature_modes")]
    pub feature_modes: Vec<FeatureMode>,
    #[serde(default = "default_workflows")]
    pub workflows: Vec<WorkflowSpec>,
    #[serde(default = "default_recall_target")]
    pub recall_target: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seed_sets")]
    pub seed_sets: u32,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub classifier: LogRegConfig,
    #[serde(default)]
    pub warm_start: bool,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Config with every optional field at its default.
    pub fn new(corpus: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            corpus: corpus.into(),
            labels: labels.into(),
            groups: None,
            splade_vectors: None,
            bm25_cache: None,
            tokenizer: TokenizerConfig::default(),
            bm25: Bm25Params::default(),
            splade: SpladeOptions::default(),
            categories: None,
            feature_modes: default_feature_modes(),
            workflows: default_workflows(),
            recall_target: DEFAULT_RECALL_TARGET,
            batch_size: DEFAULT_BATCH_SIZE,
            seed_sets: DEFAULT_SEED_SETS,
            base_seed: 0,
            classifier: LogRegConfig::default(),
            warm_start: false,
            parallelism: None,
            output_dir: default_output_dir(),
        }
    }

    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, serde_json::Error> {
        let mut config: Self = serde_json::from_str(text)?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base).map_err(|source| RunnerError::Json { path: path.to_path_buf(), source })
    }

    pub fn resolve_paths(&mut self, base_dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.labels);
        fix(&mut self.output_dir);
        for p in [&mut self.groups, &mut self.splade_vectors, &mut self.bm25_cache].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn needs(&self, family: FeatureFamily) -> bool {
        self.feature_modes.iter().any(|m| {
            matches!(
                (family, m),
                (_, FeatureMode::Fused)
                    | (FeatureFamily::Bm25, FeatureMode::Bm25)
                    | (FeatureFamily::Splade, FeatureMode::Splade)
            )
        })
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let mut paths = vec![("corpus", Some(&self.corpus)), ("labels", Some(&self.labels))];
        paths.push(("groups", self.groups.as_ref()));
        paths.push(("splade_vectors", self.splade_vectors.as_ref()));
        paths.push(("bm25_cache", self.bm25_cache.as_ref()));
        for (field, path) in paths {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(RunnerError::MissingPath { field, path: path.clone() });
                }
            }
        }
        if self.seed_sets == 0 {
            return bad("seed_sets must be at least 1".into());
        }
        if self.feature_modes.is_empty() {
            return bad("feature_modes is empty".into());
        }
        if self.workflows.is_empty() {
            return bad("workflows is empty".into());
        }
        if self.needs(FeatureFamily::Splade) && self.splade_vectors.is_none() {
            return bad("splade and fused modes need splade_vectors".into());
        }
        if !(self.recall_target > 0.0 && self.recall_target <= 1.0) {
            return bad(format!("recall_target must be in (0, 1], got {}", self.recall_target));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be at least 1".into());
        }
        let mut labels = BTreeSet::new();
        for spec in &self.workflows {
            let resolved = spec.resolve();
            resolved.cost.validate()?;
            if !labels.insert(resolved.label.clone()) {
                return bad(format!("workflow label {} appears twice", resolved.label));
            }
        }
        Ok(())
    }

    /// Normalized form that drives the config hash: defaults filled in, list
    /// order and duplicates ignored, execution-only fields dropped.
    fn canonical(&self) -> serde_json::Value {
        let mut modes = self.feature_modes.clone();
        modes.sort();
        modes.dedup();
        let mut workflows: Vec<ResolvedWorkflow> = self.workflows.iter().map(WorkflowSpec::resolve).collect();
        workflows.sort_by(|a, b| a.label.cmp(&b.label));
        let categories = self.categories.as_ref().map(|c| c.iter().collect::<BTreeSet<_>>());
        let mut splade = self.splade;
        splade.top_s = Some(splade.effective_top_s());
        serde_json::json!({
            "schema_version": self.schema_version,
            "corpus": self.corpus,
            "labels": self.labels,
            "splade_vectors": self.splade_vectors,
            "bm25_cache": self.bm25_cache,
            "tokenizer": self.tokenizer,
            "bm25": self.bm25,
            "splade": splade,
            "categories": categories,
            "feature_modes": modes,
            "workflows": workflows,
            "recall_target": self.recall_target,
            "batch_size": self.batch_size,
            "seed_sets": self.seed_sets,
            "base_seed": self.base_seed,
            "classifier": self.classifier,
            "warm_start": self.warm_start,
        })
    }

    /// SHA-256 over the canonical form. Worker count, output directory and
    /// the grouping file (report-only) do not affect it.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Loaded collection and the feature matrices the grid needs.
pub struct Inputs {
    pub collection: LabeledCollection,
    pub bm25: Option<SparseMatrix>,
    pub splade: Option<SparseMatrix>,
}

impl Inputs {
    pub fn features(&self) -> FeatureSet<'_> {
        FeatureSet { bm25: self.bm25.as_ref(), splade: self.splade.as_ref() }
    }
}

pub fn load_inputs(config: &ExperimentConfig) -> Result<Inputs, RunnerError> {
    let mut collection = corpus::load_corpus(&config.corpus, &config.tokenizer)?;
    let excluded = corpus::load_labels(&config.labels, &mut collection)?;
    if !excluded.is_empty() {
        log::warn!("{} categories excluded: {}", excluded.len(), excluded.join(", "));
    }
    if let Some(groups) = &config.groups {
        corpus::load_groups(groups, &mut collection)?;
    }
    let bm25 = if config.needs(FeatureFamily::Bm25) {
        Some(match &config.bm25_cache {
            Some(path) => {
                let m = SparseMatrix::read_cache_file(path)?;
                if m.family() != FeatureFamily::Bm25 || m.n_rows() != collection.len() {
                    return Err(RunnerError::Config(format!(
                        "{} holds a {} matrix with {} rows, expected bm25 with {}",
                        path.display(),
                        m.family(),
                        m.n_rows(),
                        collection.len()
                    )));
                }
                m
            }
            None => features::encode_bm25(&collection, config.bm25)?.0,
        })
    } else {
        None
    };
    let splade = match (&config.splade_vectors, config.needs(FeatureFamily::Splade)) {
        (Some(path), true) => Some(features::load_sparse_vectors(path, &collection, &config.splade)?),
        _ => None,
    };
    Ok(Inputs { collection, bm25, splade })
}

/// Category ids that the grid covers, in sorted order.
pub fn grid_categories(config: &ExperimentConfig, collection: &LabeledCollection) -> Result<Vec<String>, RunnerError> {
    match &config.categories {
        None => Ok(collection.categories.keys().cloned().collect()),
        Some(filter) => {
            let wanted: BTreeSet<&String> = filter.iter().collect();
            for c in &wanted {
                if !collection.categories.contains_key(*c) {
                    return Err(RunnerError::Config(format!("category {c} has no usable labels")));
                }
            }
            Ok(wanted.into_iter().cloned().collect())
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}

pub fn run_id(category: &str, workflow_label: &str, mode: FeatureMode, seed_set: u32) -> String {
    format!("{}__{}__{mode}__seed{seed_set:02}", sanitize(category), sanitize(workflow_label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedRun {
    pub run_id: String,
    pub category: String,
    pub seed_set: u32,
    pub feature_mode: FeatureMode,
    pub workflow: ResolvedWorkflow,
}

impl PlannedRun {
    pub fn run_config(&self, config: &ExperimentConfig) -> RunConfig {
        RunConfig {
            workflow: self.workflow.workflow,
            strategy: self.workflow.strategy,
            feature_mode: self.feature_mode,
            recall_target: config.recall_target,
            batch_size: config.batch_size,
            max_iterations: self.workflow.max_iterations,
            seed_set_id: self.seed_set,
            rng_seed: sampling_seed(config.base_seed, &self.category, self.seed_set),
            classifier: config.classifier,
            warm_start: config.warm_start,
        }
    }
}

/// categories × workflows × feature modes × seed sets.
pub fn plan_grid(config: &ExperimentConfig, categories: &[String]) -> Result<Vec<PlannedRun>, RunnerError> {
    let mut modes = config.feature_modes.clone();
    modes.sort();
    modes.dedup();
    let workflows: Vec<ResolvedWorkflow> = config.workflows.iter().map(WorkflowSpec::resolve).collect();
    let mut runs = Vec::new();
    let mut ids = BTreeSet::new();
    for category in categories {
        for wf in &workflows {
            for &mode in &modes {
                for seed_set in 0..config.seed_sets {
                    let id = run_id(category, &wf.label, mode, seed_set);
                    if !ids.insert(id.clone()) {
                        return Err(RunnerError::Config(format!("run id {id} is not unique after sanitizing")));
                    }
                    runs.push(PlannedRun {
                        run_id: id,
                        category: category.clone(),
                        seed_set,
                        feature_mode: mode,
                        workflow: wf.clone(),
                    });
                }
            }
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub run: PlannedRun,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    /// Record path relative to the run directory.
    #[serde(default)]
    pub record: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Self, RunnerError> {
        let path = Self::path(run_dir);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|source| RunnerError::Json { path, source })
    }

    /// Written to a temporary file and renamed into place.
    pub fn save(&self, run_dir: &Path) -> Result<(), RunnerError> {
        let path = Self::path(run_dir);
        let tmp = path.with_extension("json.tmp");
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn failed(&self) -> Vec<&ManifestEntry> {
        self.runs.values().filter(|e| e.status == RunStatus::Failed).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub run_dir: PathBuf,
    pub planned: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: Vec<String>,
}

fn write_record(path: &Path, record: &RunRecord) -> Result<(), RunnerError> {
    let tmp = path.with_extension("jsonl.tmp");
    let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    record.write_jsonl(BufWriter::new(file))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_record(path: &Path) -> Result<RunRecord, RunnerError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(RunRecord::read_jsonl(BufReader::new(file))?)
}

/// Executes every grid run that is not already completed in the manifest.
/// Failed runs are recorded there and reported in the summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary, RunnerError> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    run_experiment_with(config, &inputs)
}

/// As [`run_experiment`], with inputs already loaded.
pub fn run_experiment_with(config: &ExperimentConfig, inputs: &Inputs) -> Result<ExperimentSummary, RunnerError> {
    let run_dir = config.output_dir.clone();
    let runs_dir = run_dir.join(RUNS_DIR);
    fs::create_dir_all(&runs_dir).map_err(io_err(&runs_dir))?;

    let hash = config.hash();
    let mut manifest = if Manifest::path(&run_dir).exists() {
        let existing = Manifest::load(&run_dir)?;
        if existing.config_hash != hash {
            return Err(RunnerError::ConfigMismatch { expected: hash, found: existing.config_hash });
        }
        existing
    } else {
        Manifest { config_hash: hash, config: config.clone(), runs: BTreeMap::new() }
    };
    manifest.config.parallelism = config.parallelism;

    let categories = grid_categories(config, &inputs.collection)?;
    let planned = plan_grid(config, &categories)?;
    let mut todo = Vec::new();
    for run in &planned {
        let done = manifest.runs.get(&run.run_id).is_some_and(|e| {
            e.status == RunStatus::Completed && e.record.as_ref().is_some_and(|r| run_dir.join(r).is_file())
        });
        if !done {
            todo.push(run.clone());
            manifest.runs.insert(
                run.run_id.clone(),
                ManifestEntry { run: run.clone(), status: RunStatus::Pending, error: None, record: None },
            );
        }
    }
    manifest.save(&run_dir)?;
    let skipped = planned.len() - todo.len();
    log::info!("{} runs planned, {} already complete", planned.len(), skipped);

    // seeds depend only on category and seed set, so every mode and workflow shares them
    let mut seeds: BTreeMap<&str, Result<Vec<SeedPair>, String>> = BTreeMap::new();
    for run in &todo {
        seeds.entry(run.category.as_str()).or_insert_with(|| {
            let labels = inputs.collection.category(&run.category).map_err(|e| e.to_string())?;
            seed_sets(&inputs.collection, labels, config.base_seed, config.seed_sets).map_err(|e| e.to_string())
        });
    }

    let features = inputs.features();
    let execute = |run: &PlannedRun| -> Result<String, String> {
        let pairs = seeds[run.category.as_str()].as_ref().map_err(Clone::clone)?;
        let labels = inputs.collection.category(&run.category).map_err(|e| e.to_string())?;
        let record =
            run_tar(&run.run_config(config), &inputs.collection, labels, pairs[run.seed_set as usize], &features)
                .map_err(|e| e.to_string())?;
        let rel = format!("{RUNS_DIR}/{}.jsonl", run.run_id);
        write_record(&run_dir.join(&rel), &record).map_err(|e| e.to_string())?;
        Ok(rel)
    };

    let manifest = Mutex::new(manifest);
    let save_error: Mutex<Option<RunnerError>> = Mutex::new(None);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.unwrap_or(0))
        .build()
        .map_err(|e| RunnerError::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        todo.par_iter().for_each(|run| {
            let outcome = execute(run);
            match &outcome {
                Ok(_) => log::info!("{} done", run.run_id),
                Err(e) => log::error!("{} failed: {e}", run.run_id),
            }
            let mut m = manifest.lock().expect("manifest lock");
            let entry = m.runs.get_mut(&run.run_id).expect("planned run in manifest");
            match outcome {
                Ok(rel) => {
                    entry.status = RunStatus::Completed;
                    entry.record = Some(rel);
                    entry.error = None;
                }
                Err(e) => {
                    entry.status = RunStatus::Failed;
                    entry.error = Some(e);
                }
            }
            if let Err(e) = m.save(&run_dir) {
                save_error.lock().expect("error lock").get_or_insert(e);
            }
        })
    });
    if let Some(e) = save_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let manifest = manifest.into_inner().expect("manifest lock");
    let failed = manifest.failed().into_iter().map(|e| e.run.run_id.clone()).collect();
    Ok(ExperimentSummary { run_dir, planned: planned.len(), executed: todo.len(), skipped, failed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCostRow {
    pub category: String,
    pub seed_set: u32,
    pub feature_mode: FeatureMode,
    pub workflow: String,
    pub optimal_cost: f64,
    pub argmin_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub workflow: String,
    pub feature_mode: FeatureMode,
    pub relative_cost: f64,
    pub categories: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub workflow: String,
    pub feature_mode: FeatureMode,
    pub difficulty: Difficulty,
    pub prevalence: Prevalence,
    pub relative_cost: f64,
    pub categories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub baseline_mode: FeatureMode,
    pub rows: Vec<ReportRow>,
    pub groups: Vec<GroupRow>,
    pub run_costs: Vec<RunCostRow>,
}

/// Optimal cost of every completed run, in run-id order.
pub fn collect_run_costs(run_dir: &Path) -> Result<Vec<RunCostRow>, RunnerError> {
    let manifest = Manifest::load(run_dir)?;
    let mut out = Vec::new();
    for entry in manifest.runs.values() {
        let (RunStatus::Completed, Some(rel)) = (entry.status, &entry.record) else {
            log::warn!("{} is not completed; left out of the report", entry.run.run_id);
            continue;
        };
        let record = read_record(&run_dir.join(rel))?;
        let (cost, argmin) = optimal_cost(&record, &entry.run.workflow.cost)
            .map_err(|source| RunnerError::RunCost { run_id: entry.run.run_id.clone(), source })?;
        out.push(RunCostRow {
            category: entry.run.category.clone(),
            seed_set: entry.run.seed_set,
            feature_mode: entry.run.feature_mode,
            workflow: entry.run.workflow.label.clone(),
            optimal_cost: cost,
            argmin_iteration: argmin,
        });
    }
    Ok(out)
}

/// Relative cost of every (workflow, feature mode) against `baseline_mode`
/// under the same workflow. Pure function of the run costs.
pub fn build_report(
    run_costs: Vec<RunCostRow>,
    baseline_mode: FeatureMode,
    groups: Option<&BTreeMap<String, CategoryGroup>>,
) -> Result<Report, RunnerError> {
    let mut by_arm: BTreeMap<(String, FeatureMode), Vec<RunCost>> = BTreeMap::new();
    for r in &run_costs {
        by_arm.entry((r.workflow.clone(), r.feature_mode)).or_default().push(RunCost {
            category: r.category.clone(),
            seed_set: r.seed_set,
            cost: r.optimal_cost,
        });
    }
    let mut rows = Vec::new();
    let mut group_rows = Vec::new();
    for ((workflow, mode), costs) in &by_arm {
        let baseline = by_arm
            .get(&(workflow.clone(), baseline_mode))
            .ok_or_else(|| RunnerError::MissingBaseline { workflow: workflow.clone(), mode: baseline_mode })?;
        let ratios = category_ratios(costs, baseline)?;
        rows.push(ReportRow {
            workflow: workflow.clone(),
            feature_mode: *mode,
            relative_cost: mean(ratios.values().copied()),
            categories: ratios.len(),
            runs: costs.len(),
        });
        if let Some(groups) = groups {
            let mut cells: BTreeMap<CategoryGroup, Vec<f64>> = BTreeMap::new();
            for (category, ratio) in &ratios {
                match groups.get(category) {
                    Some(g) => cells.entry(*g).or_default().push(*ratio),
                    None => log::warn!("category {category} has no group; left out of the group table"),
                }
            }
            for (g, values) in cells {
                group_rows.push(GroupRow {
                    workflow: workflow.clone(),
                    feature_mode: *mode,
                    difficulty: g.difficulty,
                    prevalence: g.prevalence,
                    relative_cost: mean(values.iter().copied()),
                    categories: values.len(),
                });
            }
        }
    }
    Ok(Report { baseline_mode, rows, groups: group_rows, run_costs })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_GROUPS_CSV: &str = "report_groups.csv";
pub const RUN_COSTS_CSV: &str = "run_costs.csv";
pub const REPORT_MD: &str = "report.md";

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunnerError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        md.push_str("# Relative review cost\n\n");
        md.push_str(&format!("Baseline feature mode: {}\n\n", self.baseline_mode));
        md.push_str("| workflow | feature mode | relative cost | categories | runs |\n|---|---|---:|---:|---:|\n");
        for r in &self.rows {
            md.push_str(&format!(
                "| {} | {} | {:.4} | {} | {} |\n",
                r.workflow, r.feature_mode, r.relative_cost, r.categories, r.runs
            ));
        }
        type Cells<'a> = BTreeMap<(Difficulty, Prevalence), &'a GroupRow>;
        let mut arms: BTreeMap<(&str, FeatureMode), Cells> = BTreeMap::new();
        for g in &self.groups {
            arms.entry((&g.workflow, g.feature_mode)).or_default().insert((g.difficulty, g.prevalence), g);
        }
        let prevalences = [Prevalence::Rare, Prevalence::Medium, Prevalence::Common];
        for ((workflow, mode), cells) in arms {
            md.push_str(&format!("\n## {workflow}, {mode}, by difficulty and prevalence\n\n"));
            md.push_str("| difficulty | rare | medium | common |\n|---|---:|---:|---:|\n");
            for d in [Difficulty::Hard, Difficulty::Medium, Difficulty::Easy] {
                md.push_str(&format!("| {d} |"));
                for p in prevalences {
                    match cells.get(&(d, p)) {
                        Some(g) => md.push_str(&format!(" {:.4} |", g.relative_cost)),
                        None => md.push_str(" - |"),
                    }
                }
                md.push('\n');
            }
        }
        md
    }

    /// Writes the CSV tables and the markdown summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), RunnerError> {
        write_csv(&dir.join(REPORT_CSV), &self.rows)?;
        write_csv(&dir.join(RUN_COSTS_CSV), &self.run_costs)?;
        let groups_path = dir.join(REPORT_GROUPS_CSV);
        if self.groups.is_empty() {
            if groups_path.exists() {
                fs::remove_file(&groups_path).map_err(io_err(&groups_path))?;
            }
        } else {
            write_csv(&groups_path, &self.groups)?;
        }
        let md_path = dir.join(REPORT_MD);
        fs::write(&md_path, self.to_markdown()).map_err(io_err(&md_path))
    }
}

/// Reads every completed record in `run_dir`, computes relative costs and
/// writes the report files next to the manifest.
pub fn aggregate(
    run_dir: &Path,
    baseline_mode: FeatureMode,
    groups: Option<&BTreeMap<String, CategoryGroup>>,
) -> Result<Report, RunnerError> {
    let report = build_report(collect_run_costs(run_dir)?, baseline_mode, groups)?;
    report.write(run_dir)?;
    Ok(report)
}

/// Run ids equal to `selector`, or containing it when there is no exact match.
pub fn select_run(manifest: &Manifest, selector: &str) -> Result<String, RunnerError> {
    if manifest.runs.contains_key(selector) {
        return Ok(selector.to_string());
    }
    let matches: Vec<String> = manifest.runs.keys().filter(|id| id.contains(selector)).cloned().collect();
    match matches.len() {
        0 => Err(RunnerError::NoMatchingRun(selector.to_string())),
        1 => Ok(matches.into_iter().next().expect("one match")),
        _ => Err(RunnerError::AmbiguousRun { selector: selector.to_string(), matches }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsOutput {
    pub run_id: String,
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub table: CostDynamics,
}

/// Writes the per-iteration cost table and a stacked-area chart of the four
/// sectors for one two-phase run. `cost` overrides the run's own structure.
pub fn emit_dynamics(
    run_dir: &Path,
    selector: &str,
    cost: Option<CostStructure>,
) -> Result<DynamicsOutput, RunnerError> {
    let manifest = Manifest::load(run_dir)?;
    let run_id = select_run(&manifest, selector)?;
    let entry = &manifest.runs[&run_id];
    if entry.run.workflow.workflow != Workflow::TwoPhase {
        return Err(RunnerError::NotTwoPhase(run_id));
    }
    let rel = match (entry.status, &entry.record) {
        (RunStatus::Completed, Some(rel)) => rel,
        _ => return Err(RunnerError::NoMatchingRun(format!("{run_id} (not completed)"))),
    };
    let record = read_record(&run_dir.join(rel))?;
    let cs = cost.unwrap_or(entry.run.workflow.cost);
    let table = cost_dynamics_table(&record, &cs)?;

    let out_dir = run_dir.join(DYNAMICS_DIR);
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let csv_path = out_dir.join(format!("{run_id}.csv"));
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    table.write_csv(BufWriter::new(file))?;
    let svg_path = out_dir.join(format!("{run_id}.svg"));
    let svg = render_dynamics_svg(&table, &run_id)?;
    fs::write(&svg_path, svg).map_err(io_err(&svg_path))?;
    Ok(DynamicsOutput { run_id, csv: csv_path, svg: svg_path, table })
}

/// Caption drawn next to the first iteration that needs no second phase.
pub const DEPTH_ZERO_MARKER: &str = "no second phase needed";

/// Stacked areas, bottom to top: phase-one relevant, phase-one non-relevant,
/// phase-two relevant, phase-two non-relevant. A gray dashed vertical line
/// marks the first iteration whose phase one alone meets the target.
pub fn render_dynamics_svg(table: &CostDynamics, title: &str) -> Result<String, RunnerError> {
    use plotters::prelude::*;
    use plotters::style::text_anchor::{HPos, Pos, VPos};

    let chart_err = |e: &dyn std::fmt::Display| RunnerError::Chart(e.to_string());
    let n = table.entries.len();
    let x_max = (n.saturating_sub(1)).max(1) as f64;
    let y_max = table.entries.iter().map(|e| e.total).fold(0.0f64, f64::max).max(1.0) * 1.05;
    type Layer = (&'static str, RGBColor, fn(&crate::cost::CostEntry) -> f64);
    let layers: [Layer; 4] = [
        ("phase 2 non-relevant", RGBColor(0xcc, 0xcc, 0xcc), |e| e.total),
        ("phase 2 relevant", RGBColor(0x8f, 0xbc, 0x8f), |e| e.p1_pos + e.p1_neg + e.p2_pos),
        ("phase 1 non-relevant", RGBColor(0x64, 0x95, 0xed), |e| e.p1_pos + e.p1_neg),
        ("phase 1 relevant", RGBColor(0x1f, 0x3a, 0x93), |e| e.p1_pos),
    ];

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| chart_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(64)
            .build_cartesian_2d(0f64..x_max, 0f64..y_max)
            .map_err(|e| chart_err(&e))?;
        chart
            .configure_mesh()
            .x_desc("iteration")
            .y_desc("cost")
            .x_labels(n.clamp(2, 11))
            .x_label_formatter(&|x| format!("{x:.0}"))
            .y_label_formatter(&|y| format!("{y:.0}"))
            .disable_mesh()
            .draw()
            .map_err(|e| chart_err(&e))?;
        for (label, color, top) in layers {
            let points: Vec<(f64, f64)> = table.entries.iter().map(|e| (e.iteration as f64, top(e))).collect();
            chart
                .draw_series(AreaSeries::new(points, 0.0, color.filled()).border_style(color))
                .map_err(|e| chart_err(&e))?
                .label(label)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
        }
        if let Some(i) = table.first_depth_zero() {
            let x = table.entries[i].iteration as f64;
            let gray = RGBColor(0x80, 0x80, 0x80);
            chart
                .draw_series(DashedLineSeries::new(vec![(x, 0.0), (x, y_max)], 6, 4, gray.stroke_width(2)))
                .map_err(|e| chart_err(&e))?;
            // anchor the caption on whichever side of the line has room
            let hpos = if x > x_max / 2.0 { HPos::Right } else { HPos::Left };
            let style = ("sans-serif", 12).into_font().color(&gray).pos(Pos::new(hpos, VPos::Top));
            chart
                .draw_series(std::iter::once(Text::new(DEPTH_ZERO_MARKER, (x, y_max * 0.6), style)))
                .map_err(|e| chart_err(&e))?;
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperRight)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(|e| chart_err(&e))?;
        root.present().map_err(|e| chart_err(&e))?;
    }
    Ok(svg)
}
