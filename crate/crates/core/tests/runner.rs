use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use tarsim::corpus::{CategoryGroup, Difficulty, Prevalence};
use tarsim::runner::*;
use tarsim::synthetic::{complementary_corpus, ComplementarySpec, SignatureSpec};
use tarsim::workflow::{FeatureMode, Workflow};

/// Two categories over one generated collection: the planted class and a
/// class made of every 7th document.
fn fixture(dir: &Path) -> ExperimentConfig {
    let spec = ComplementarySpec {
        text: SignatureSpec { n_docs: 240, n_relevant: 24, ..SignatureSpec::default() },
        vector_vocab: 256,
        vector_nnz: 20,
        ..ComplementarySpec::default()
    };
    let c = complementary_corpus(&spec);
    c.write_corpus(fs::File::create(dir.join("corpus.jsonl")).unwrap()).unwrap();
    c.write_vectors(fs::File::create(dir.join("vectors.jsonl")).unwrap()).unwrap();
    let mut qrels = Vec::new();
    c.write_qrels(&mut qrels).unwrap();
    for (i, d) in c.docs.iter().enumerate() {
        qrels.extend(format!("every7 {} {}\n", d.doc_id, u8::from(i % 7 == 0)).bytes());
    }
    fs::write(dir.join("qrels.txt"), qrels).unwrap();
    fs::write(dir.join("groups.csv"), "category_id,difficulty,prevalence\nsynthetic,easy,common\nevery7,hard,common\n")
        .unwrap();
    let json = r#"{
        "corpus": "corpus.jsonl",
        "labels": "qrels.txt",
        "splade_vectors": "vectors.jsonl",
        "splade": {"vocab_size": 256},
        "feature_modes": ["bm25"],
        "workflows": [{"workflow": "one_phase"}],
        "batch_size": 20,
        "output_dir": "out"
    }"#;
    ExperimentConfig::from_json(json, dir).unwrap()
}

fn record_files(run_dir: &Path) -> Vec<String> {
    let mut names: Vec<String> =
        fs::read_dir(run_dir.join(RUNS_DIR)).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

#[test]
fn grid_writes_one_record_per_run_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixture(tmp.path());
    let summary = run_experiment(&config).unwrap();
    assert_eq!((summary.planned, summary.executed, summary.skipped), (20, 20, 0));
    assert!(summary.failed.is_empty());
    let files = record_files(&summary.run_dir);
    assert_eq!(files.len(), 20);
    let manifest = Manifest::load(&summary.run_dir).unwrap();
    assert_eq!(manifest.config_hash, config.hash());
    assert!(manifest.runs.values().all(|e| e.status == RunStatus::Completed));

    let victim = summary.run_dir.join(RUNS_DIR).join(&files[3]);
    let before = fs::read(&victim).unwrap();
    let untouched = summary.run_dir.join(RUNS_DIR).join(&files[4]);
    let mtime = fs::metadata(&untouched).unwrap().modified().unwrap();
    fs::remove_file(&victim).unwrap();
    let again = run_experiment(&config).unwrap();
    assert_eq!((again.executed, again.skipped), (1, 19));
    assert_eq!(fs::read(&victim).unwrap(), before);
    assert_eq!(fs::metadata(&untouched).unwrap().modified().unwrap(), mtime);

    let mut changed = config.clone();
    changed.batch_size = 30;
    assert!(matches!(run_experiment(&changed), Err(RunnerError::ConfigMismatch { .. })));
    let mut workers = config.clone();
    workers.parallelism = Some(1);
    assert_eq!(run_experiment(&workers).unwrap().executed, 0);
}

#[test]
fn validation_rejects_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fixture(tmp.path());
    config.feature_modes = vec![FeatureMode::Fused];
    config.splade_vectors = None;
    assert!(matches!(config.validate(), Err(RunnerError::Config(_))));
    config.splade_vectors = Some(tmp.path().join("nope.jsonl"));
    assert!(matches!(config.validate(), Err(RunnerError::MissingPath { field: "splade_vectors", .. })));
    let mut config = fixture(tmp.path());
    config.seed_sets = 0;
    assert!(config.validate().is_err());
}

#[test]
fn failed_runs_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fixture(tmp.path());
    // a relevant document with no tokens cannot seed a run
    let mut corpus = fs::read_to_string(&config.corpus).unwrap();
    corpus.push_str("{\"doc_id\": \"blank\", \"text\": \"  \"}\n");
    fs::write(&config.corpus, corpus).unwrap();
    let mut qrels = fs::read_to_string(&config.labels).unwrap();
    qrels.push_str("blankcat blank 1\nblankcat doc00000 0\n");
    fs::write(&config.labels, qrels).unwrap();
    config.seed_sets = 2;
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.failed.len(), 2);
    let manifest = Manifest::load(&summary.run_dir).unwrap();
    let failed = &manifest.runs[&summary.failed[0]];
    assert_eq!(failed.status, RunStatus::Failed);
    assert!(failed.error.as_deref().unwrap().contains("no eligible relevant seed"), "{failed:?}");
}

#[test]
fn aggregate_is_deterministic_and_baseline_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fixture(tmp.path());
    config.feature_modes = vec![FeatureMode::Bm25, FeatureMode::Splade, FeatureMode::Fused];
    config.workflows.push(tarsim::runner::WorkflowSpec::new(Workflow::TwoPhase));
    config.seed_sets = 3;
    config.categories = Some(vec!["synthetic".into()]);
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.planned, 18);
    let groups: BTreeMap<String, CategoryGroup> =
        tarsim::corpus::read_groups_file(&tmp.path().join("groups.csv")).unwrap();
    let report = aggregate(&summary.run_dir, FeatureMode::Bm25, Some(&groups)).unwrap();
    assert_eq!(report.rows.len(), 6);
    for row in report.rows.iter().filter(|r| r.feature_mode == FeatureMode::Bm25) {
        assert_eq!(row.relative_cost, 1.0);
    }
    assert_eq!(report.groups.len(), 6);
    assert!(report.groups.iter().all(|g| (g.difficulty, g.prevalence) == (Difficulty::Easy, Prevalence::Common)));

    let read_all =
        |dir: &Path| [REPORT_CSV, REPORT_GROUPS_CSV, RUN_COSTS_CSV, REPORT_MD].map(|f| fs::read(dir.join(f)).unwrap());
    let first = read_all(&summary.run_dir);
    aggregate(&summary.run_dir, FeatureMode::Bm25, Some(&groups)).unwrap();
    assert_eq!(read_all(&summary.run_dir), first);

    let run_costs = String::from_utf8(first[2].clone()).unwrap();
    assert!(run_costs.starts_with("category,seed_set,feature_mode,workflow,optimal_cost,argmin_iteration\n"));
    assert_eq!(run_costs.lines().count(), 19);
    let md = String::from_utf8(first[3].clone()).unwrap();
    assert!(md.contains("| one_phase-relevance-uniform | bm25 | 1.0000 | 1 | 3 |"), "{md}");
}

#[test]
fn dynamics_for_two_phase_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fixture(tmp.path());
    config.workflows.push(tarsim::runner::WorkflowSpec::new(Workflow::TwoPhase));
    config.seed_sets = 1;
    config.categories = Some(vec!["synthetic".into()]);
    let summary = run_experiment(&config).unwrap();

    assert!(matches!(emit_dynamics(&summary.run_dir, "one_phase", None), Err(RunnerError::NotTwoPhase(_))));
    assert!(matches!(emit_dynamics(&summary.run_dir, "nothing-like-this", None), Err(RunnerError::NoMatchingRun(_))));
    assert!(matches!(emit_dynamics(&summary.run_dir, "seed00", None), Err(RunnerError::AmbiguousRun { .. })));

    let out = emit_dynamics(&summary.run_dir, "two_phase", None).unwrap();
    let record = read_record(&summary.run_dir.join(RUNS_DIR).join(format!("{}.jsonl", out.run_id))).unwrap();
    let csv = fs::read_to_string(&out.csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "iteration,p1_pos,p1_neg,p2_pos,p2_neg,total,depth_zero_flag");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), record.iterations.len());
    for r in &rows {
        assert_eq!(r[1] + r[2] + r[3] + r[4], r[5]);
    }
    assert_eq!(rows.last().unwrap()[6], 1.0);
    let svg = fs::read_to_string(&out.svg).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains(DEPTH_ZERO_MARKER));
}

#[test]
fn bm25_cache_gives_the_same_records() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fixture(tmp.path());
    config.seed_sets = 2;
    config.categories = Some(vec!["synthetic".into()]);
    let direct = run_experiment(&config).unwrap();

    let coll = tarsim::corpus::load_corpus(&config.corpus, &config.tokenizer).unwrap();
    let (matrix, _) = tarsim::features::encode_bm25(&coll, config.bm25).unwrap();
    let cache = tmp.path().join("bm25.bin");
    matrix.write_cache_file(&cache).unwrap();
    config.bm25_cache = Some(cache);
    config.output_dir = tmp.path().join("cached");
    let cached = run_experiment(&config).unwrap();
    assert_eq!(cached.executed, 2);
    for name in record_files(&direct.run_dir) {
        let a = fs::read(direct.run_dir.join(RUNS_DIR).join(&name)).unwrap();
        let b = fs::read(cached.run_dir.join(RUNS_DIR).join(&name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}
