use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use tarsim::corpus::{self, TokenizerConfig};
use tarsim::cost::CostSpec;
use tarsim::features::{self, Bm25Params, SPLADE_VOCAB_SIZE};
use tarsim::runner::{self, ExperimentConfig, WorkflowSpec};
use tarsim::synthetic::{complementary_corpus, signature_corpus, ComplementarySpec, SignatureSpec};
use tarsim::workflow::{FeatureMode, Workflow};

/// Worker-count override for `run`.
const WORKERS_ENV: &str = "TARSIM_WORKERS";

#[derive(Parser)]
#[command(name = "tarsim", version, about = "Technology-assisted review simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Drop documents whose text repeats an earlier document (MD5 of the text).
    Dedupe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Encode a corpus as BM25-saturated term weights into a binary cache.
    EncodeBm25 {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Term list, one per line in column order. Defaults to `<out>.vocab.txt`.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = Bm25Params::default().k1)]
        k1: f64,
        #[arg(long, default_value_t = Bm25Params::default().b)]
        b: f64,
        /// Keep token case.
        #[arg(long)]
        keep_case: bool,
    },
    /// Check a learned-sparse vector file; exits nonzero if any record is bad.
    ValidateVectors {
        #[arg(long)]
        vectors: PathBuf,
        /// Also check that every corpus document has exactly one vector.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = SPLADE_VOCAB_SIZE)]
        vocab_size: usize,
    },
    /// Run an experiment grid. Flags override the config file.
    Run(RunArgs),
    /// Relative-cost report of a run directory.
    Aggregate {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "bm25", value_parser = parse_serde::<FeatureMode>)]
        baseline: FeatureMode,
        /// `category_id,difficulty,prevalence` CSV; defaults to the config's groups file.
        #[arg(long)]
        groups: Option<PathBuf>,
    },
    /// Cost-dynamics CSV and chart for one two-phase run.
    Dynamics {
        #[arg(long)]
        run_dir: PathBuf,
        /// Run id, or a substring matching exactly one run id.
        #[arg(long)]
        run: String,
        /// Cost structure override: `uniform` or `expensive_training`.
        #[arg(long, value_parser = parse_serde::<CostSpec>)]
        cost: Option<CostSpec>,
    },
    /// Write a generated collection and a matching experiment config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SynthKind::Complementary)]
        kind: SynthKind,
        #[arg(long, default_value_t = 2000)]
        docs: usize,
        #[arg(long, default_value_t = 100)]
        relevant: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Relevance carried by text only.
    Signature,
    /// Relevance split between text and vectors.
    Complementary,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    splade_vectors: Option<PathBuf>,
    #[arg(long)]
    bm25_cache: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_serde::<FeatureMode>)]
    feature_modes: Option<Vec<FeatureMode>>,
    /// Workflows with their default strategy and cost structure.
    #[arg(long, value_delimiter = ',', value_parser = parse_serde::<Workflow>)]
    workflows: Option<Vec<Workflow>>,
    #[arg(long)]
    recall_target: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed_sets: Option<u32>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    top_s: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    warm_start: bool,
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl RunArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let cwd = std::env::current_dir()?;
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let (Some(corpus), Some(labels)) = (&self.corpus, &self.labels) else {
                    bail!("either --config or both --corpus and --labels are required");
                };
                let mut c = ExperimentConfig::new(corpus, labels);
                c.output_dir = cwd.join(&c.output_dir);
                c
            }
        };
        let abs = |p: PathBuf| if p.is_relative() { cwd.join(p) } else { p };
        if let Some(p) = self.corpus {
            config.corpus = abs(p);
        }
        if let Some(p) = self.labels {
            config.labels = abs(p);
        }
        if let Some(p) = self.groups {
            config.groups = Some(abs(p));
        }
        if let Some(p) = self.splade_vectors {
            config.splade_vectors = Some(abs(p));
        }
        if let Some(p) = self.bm25_cache {
            config.bm25_cache = Some(abs(p));
        }
        if let Some(p) = self.output_dir {
            config.output_dir = abs(p);
        }
        if self.categories.is_some() {
            config.categories = self.categories;
        }
        if let Some(m) = self.feature_modes {
            config.feature_modes = m;
        }
        if let Some(w) = self.workflows {
            config.workflows = w.into_iter().map(WorkflowSpec::new).collect();
        }
        if let Some(x) = self.recall_target {
            config.recall_target = x;
        }
        if let Some(x) = self.batch_size {
            config.batch_size = x;
        }
        if let Some(x) = self.seed_sets {
            config.seed_sets = x;
        }
        if let Some(x) = self.base_seed {
            config.base_seed = x;
        }
        if self.top_s.is_some() {
            config.splade.top_s = self.top_s;
        }
        if let Some(x) = self.vocab_size {
            config.splade.vocab_size = x;
        }
        config.warm_start |= self.warm_start;
        if self.workers.is_some() {
            config.parallelism = self.workers;
        }
        Ok(config)
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn dedupe(input: &Path, output: &Path) -> Result<ExitCode> {
    let stats = corpus::dedupe_corpus(open(input)?, create(output)?)?;
    println!("read {} kept {} dropped {}", stats.read, stats.kept, stats.dropped);
    Ok(ExitCode::SUCCESS)
}

fn encode_bm25(
    corpus_path: &Path,
    out: &Path,
    vocab: Option<PathBuf>,
    params: Bm25Params,
    keep_case: bool,
) -> Result<ExitCode> {
    let tokenizer = TokenizerConfig { lowercase: !keep_case, ..TokenizerConfig::default() };
    let collection = corpus::load_corpus(corpus_path, &tokenizer)?;
    let (matrix, vocabulary) = features::encode_bm25(&collection, params)?;
    matrix.write_cache(create(out)?)?;
    let vocab_path = vocab.unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".vocab.txt");
        PathBuf::from(name)
    });
    let mut w = create(&vocab_path)?;
    for term in vocabulary.terms() {
        writeln!(w, "{term}")?;
    }
    w.flush()?;
    let stats = features::matrix_stats(&matrix)?;
    println!(
        "{} documents, {} terms, {:.1} nonzeros per document, density {:.2e}",
        matrix.n_rows(),
        matrix.n_cols(),
        stats.avg_nnz_per_row,
        stats.density
    );
    Ok(ExitCode::SUCCESS)
}

fn validate_vectors(vectors: &Path, corpus_path: Option<&Path>, vocab_size: usize) -> Result<ExitCode> {
    let collection = corpus_path.map(|p| corpus::load_corpus(p, &TokenizerConfig::default())).transpose()?;
    let report = features::validate_vectors(open(vectors)?, collection.as_ref(), vocab_size);
    for e in &report.errors {
        eprintln!("{e}");
    }
    println!(
        "{} records, {} errors, max nnz {}, mean nnz {:.1}",
        report.records,
        report.errors.len(),
        report.max_nnz,
        report.mean_nnz
    );
    Ok(if report.is_ok() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let config = args.into_config()?;
    let summary = runner::run_experiment(&config)?;
    println!(
        "{}: {} runs, {} executed, {} already complete, {} failed",
        summary.run_dir.display(),
        summary.planned,
        summary.executed,
        summary.skipped,
        summary.failed.len()
    );
    for id in &summary.failed {
        eprintln!("failed: {id}");
    }
    Ok(if summary.failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn aggregate(run_dir: &Path, baseline: FeatureMode, groups: Option<PathBuf>) -> Result<ExitCode> {
    let groups = match groups {
        Some(p) => Some(p),
        None => runner::Manifest::load(run_dir)?.config.groups,
    };
    let groups = groups.map(|p| corpus::read_groups_file(&p)).transpose()?;
    let report = runner::aggregate(run_dir, baseline, groups.as_ref())?;
    print!("{}", report.to_markdown());
    Ok(ExitCode::SUCCESS)
}

fn dynamics(run_dir: &Path, selector: &str, cost: Option<CostSpec>) -> Result<ExitCode> {
    let out = runner::emit_dynamics(run_dir, selector, cost.map(|c| c.structure()))?;
    println!("{}\n{}\n{}", out.run_id, out.csv.display(), out.svg.display());
    Ok(ExitCode::SUCCESS)
}

fn synth(out: &Path, kind: SynthKind, docs: usize, relevant: usize, seed: u64) -> Result<ExitCode> {
    if relevant == 0 || relevant >= docs {
        bail!("--relevant must be between 1 and --docs - 1");
    }
    let text = SignatureSpec { n_docs: docs, n_relevant: relevant, seed, ..SignatureSpec::default() };
    let generated = match kind {
        SynthKind::Signature => signature_corpus(&text),
        SynthKind::Complementary => complementary_corpus(&ComplementarySpec { text, ..ComplementarySpec::default() }),
    };
    fs::create_dir_all(out)?;
    generated.write_corpus(create(&out.join("corpus.jsonl"))?)?;
    generated.write_qrels(create(&out.join("qrels.txt"))?)?;
    let mut config = ExperimentConfig::new("corpus.jsonl", "qrels.txt");
    config.output_dir = "runs".into();
    if generated.vector_vocab > 0 {
        generated.write_vectors(create(&out.join("vectors.jsonl"))?)?;
        config.splade_vectors = Some("vectors.jsonl".into());
        config.splade.vocab_size = generated.vector_vocab;
        config.feature_modes = vec![FeatureMode::Bm25, FeatureMode::Splade, FeatureMode::Fused];
    }
    let mut w = create(&out.join("config.json"))?;
    serde_json::to_writer_pretty(&mut w, &config)?;
    writeln!(w)?;
    w.flush()?;
    println!("{}", out.join("config.json").display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dedupe { input, output } => dedupe(&input, &output),
        Command::EncodeBm25 { corpus, out, vocab, k1, b, keep_case } => {
            encode_bm25(&corpus, &out, vocab, Bm25Params { k1, b }, keep_case)
        }
        Command::ValidateVectors { vectors, corpus, vocab_size } => {
            validate_vectors(&vectors, corpus.as_deref(), vocab_size)
        }
        Command::Run(args) => run(args),
        Command::Aggregate { run_dir, baseline, groups } => aggregate(&run_dir, baseline, groups),
        Command::Dynamics { run_dir, run, cost } => dynamics(&run_dir, &run, cost),
        Command::Synth { out, kind, docs, relevant, seed } => synth(&out, kind, docs, relevant, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
