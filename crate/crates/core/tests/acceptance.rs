//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tarsim::classifier::{gradient, objective, train, LogRegConfig, LogRegModel};
use tarsim::corpus::TokenizerConfig;
use tarsim::cost::{
    cost_dynamics_table, iteration_cost, optimal_cost, relative_cost, CostError, CostStructure, RunCost,
    TRAINING_COST_MULTIPLIER,
};
use tarsim::features::{
    default_top_s, encode_bm25, Bm25Params, FeatureFamily, SparseMatrix, SparseVector, SpladeOptions, SPLADE_VOCAB_SIZE,
};
use tarsim::runner::{self, ExperimentConfig};
use tarsim::sampling::{Strategy, DEFAULT_BATCH_SIZE};
use tarsim::synthetic::{complementary_corpus, signature_corpus, ComplementarySpec, SignatureSpec};
use tarsim::workflow::{
    rank_depth_to_target, run_tar, sampling_seed, seed_sets, FeatureMode, FeatureSet, IterationRecord, RunConfig,
    RunHeader, RunRecord, SecondPhase, StopReason, Workflow, DEFAULT_RECALL_TARGET, DEFAULT_SEED_SETS,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(elapsed < Duration::from_secs(limit_s), || format!("took {elapsed:.1?}, limit {limit_s} s"))
}

// ---------------------------------------------------------------- solver

struct Instance {
    matrix: SparseMatrix,
    rows: Vec<usize>,
    labels: Vec<bool>,
    config: LogRegConfig,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n_docs = rng.random_range(6..=50);
    let n_cols = rng.random_range(2..=20);
    let density = rng.random_range(0.1..0.6);
    let rows: Vec<SparseVector> = (0..n_docs)
        .map(|_| {
            let mut entries = Vec::new();
            for j in 0..n_cols as u32 {
                if rng.random_bool(density) {
                    entries.push((j, rng.random_range(0.01f32..2.0)));
                }
            }
            SparseVector::from_unsorted(entries)
        })
        .collect();
    let matrix = SparseMatrix::from_rows(FeatureFamily::Bm25, n_cols, rows).unwrap();
    let mut train_rows: Vec<usize> = (0..n_docs).filter(|_| rng.random_bool(0.8)).collect();
    if train_rows.len() < 2 {
        train_rows = vec![0, 1];
    }
    let mut labels: Vec<bool> = train_rows.iter().map(|_| rng.random_bool(0.35)).collect();
    labels[0] = true;
    labels[1] = false;
    let config = LogRegConfig {
        c: [0.25, 1.0, 4.0][rng.random_range(0..3)],
        positive_class_weight: [1.0, 2.5][rng.random_range(0..2)],
        ..LogRegConfig::default()
    };
    Instance { matrix, rows: train_rows, labels, config }
}

/// Dense copy of the training rows plus the per-example class weight and sign.
fn dense(inst: &Instance) -> Vec<(Vec<f64>, f64, f64)> {
    inst.rows
        .iter()
        .zip(&inst.labels)
        .map(|(&r, &l)| {
            let mut x = vec![0.0; inst.matrix.n_cols()];
            for (j, v) in inst.matrix.row(r).iter() {
                x[j] = v;
            }
            let (y, cw) = if l { (1.0, inst.config.positive_class_weight) } else { (-1.0, 1.0) };
            (x, y, cw)
        })
        .collect()
}

fn oracle_objective(data: &[(Vec<f64>, f64, f64)], c: f64, theta: &[f64]) -> f64 {
    let m = theta.len() - 1;
    let reg: f64 = theta[..m].iter().map(|w| w * w).sum::<f64>() / (2.0 * c);
    let loss: f64 = data
        .iter()
        .map(|(x, y, cw)| {
            let z: f64 = x.iter().zip(&theta[..m]).map(|(a, b)| a * b).sum::<f64>() + theta[m];
            let t = -y * z;
            cw * if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() }
        })
        .sum();
    reg + loss
}

fn oracle_gradient(data: &[(Vec<f64>, f64, f64)], c: f64, theta: &[f64]) -> Vec<f64> {
    let m = theta.len() - 1;
    let mut g: Vec<f64> = theta[..m].iter().map(|w| w / c).collect();
    g.push(0.0);
    for (x, y, cw) in data {
        let z: f64 = x.iter().zip(&theta[..m]).map(|(a, b)| a * b).sum::<f64>() + theta[m];
        // d/dz softplus(-y z) = -y * sigmoid(-y z)
        let s = 1.0 / (1.0 + (y * z).exp());
        let coef = -cw * y * s;
        for j in 0..m {
            g[j] += coef * x[j];
        }
        g[m] += coef;
    }
    g
}

/// Plain fixed-step gradient descent run far past practical convergence.
fn gradient_descent(data: &[(Vec<f64>, f64, f64)], c: f64, dim: usize) -> f64 {
    let lipschitz =
        1.0 / c + 0.25 * data.iter().map(|(x, _, cw)| cw * (x.iter().map(|v| v * v).sum::<f64>() + 1.0)).sum::<f64>();
    let step = 1.0 / lipschitz;
    let mut theta = vec![0.0; dim];
    for _ in 0..400_000 {
        let g = oracle_gradient(data, c, &theta);
        if g.iter().fold(0.0f64, |a, v| a.max(v.abs())) < 1e-11 {
            break;
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= step * gi;
        }
    }
    oracle_objective(data, c, &theta)
}

fn solver_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_fd, mut worst_rel) = (0.0f64, 0.0f64);
    let instances = 24;
    for k in 0..instances {
        let inst = random_instance(&mut rng);
        let m = inst.matrix.n_cols();
        let data = dense(&inst);

        let mut probe = LogRegModel::zeros(m, inst.config);
        probe.weights = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        probe.bias = rng.random_range(-1.0..1.0);
        let analytic = gradient(&probe, &inst.matrix, &inst.rows, &inst.labels, &inst.config).unwrap();
        let h = 1e-6;
        for (j, &slope) in analytic.iter().enumerate() {
            let mut plus = probe.clone();
            let mut minus = probe.clone();
            if j < m {
                plus.weights[j] += h;
                minus.weights[j] -= h;
            } else {
                plus.bias += h;
                minus.bias -= h;
            }
            let fp = objective(&plus, &inst.matrix, &inst.rows, &inst.labels, &inst.config).unwrap();
            let fm = objective(&minus, &inst.matrix, &inst.rows, &inst.labels, &inst.config).unwrap();
            worst_fd = worst_fd.max(((fp - fm) / (2.0 * h) - slope).abs());
        }

        let model = train(&inst.matrix, &inst.rows, &inst.labels, &inst.config).unwrap();
        let mut theta = model.weights.clone();
        theta.push(model.bias);
        let fitted = oracle_objective(&data, inst.config.c, &theta);
        let reference = gradient_descent(&data, inst.config.c, m + 1);
        let rel = (fitted - reference).abs() / reference.abs();
        worst_rel = worst_rel.max(rel);
        check(model.diagnostics.converged, || format!("instance {k} did not converge"))?;
    }
    let elapsed = start.elapsed();
    check(worst_fd <= 1e-5, || format!("finite-difference gap {worst_fd:.2e} > 1e-5"))?;
    check(worst_rel <= 1e-6, || format!("objective gap to gradient descent {worst_rel:.2e} > 1e-6"))?;
    within(elapsed, 10)?;
    Ok(format!("{instances} instances, max FD gap {worst_fd:.1e}, max objective gap {worst_rel:.1e}, {elapsed:.1?}"))
}

// ------------------------------------------------------------------ cost

fn brute_required(total: usize, target: f64) -> usize {
    (0..=total).find(|&c| c as f64 / total as f64 >= target).unwrap_or(total)
}

struct Generated {
    record: RunRecord,
    relevant: BTreeSet<String>,
}

fn random_record(rng: &mut ChaCha8Rng, workflow: Workflow) -> Generated {
    let n = rng.random_range(10..300);
    let ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    let n_rel = rng.random_range(1..n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let relevant: BTreeSet<String> = order[..n_rel].iter().map(|&i| ids[i].clone()).collect();
    let target = [0.5, 0.75, 0.8, 0.9, 1.0][rng.random_range(0..5)];
    let required = brute_required(n_rel, target);

    let pos = order[0];
    let neg = order[n_rel];
    let mut rest: Vec<usize> = order.iter().copied().filter(|&i| i != pos && i != neg).collect();
    rest.shuffle(rng);
    let mut batches = vec![vec![pos, neg]];
    let mut cursor = 0;
    let n_iters = rng.random_range(0..30);
    for _ in 0..n_iters {
        if cursor >= rest.len() {
            break;
        }
        let size = rng.random_range(1..=20).min(rest.len() - cursor);
        batches.push(rest[cursor..cursor + size].to_vec());
        cursor += size;
    }

    let mut iterations = Vec::new();
    let (mut reviewed, mut found) = (0, 0);
    for (t, batch) in batches.iter().enumerate() {
        let batch_positives = batch.iter().filter(|&&i| relevant.contains(&ids[i])).count();
        reviewed += batch.len();
        found += batch_positives;
        let (depth, positives) = match workflow {
            Workflow::OnePhase => (None, None),
            Workflow::TwoPhase if found >= required => (Some(0), Some(0)),
            Workflow::TwoPhase => {
                let need = required - found;
                let depth = rng.random_range(need..=(n - reviewed).max(need));
                (Some(depth), Some(rng.random_range(need..=depth.min(n_rel - found))))
            }
        };
        iterations.push(IterationRecord {
            iteration: t,
            batch: batch.iter().map(|&i| ids[i].clone()).collect(),
            batch_positives,
            cumulative_reviewed: reviewed,
            cumulative_positives: found,
            second_phase_depth: depth,
            second_phase_positives: positives,
        });
    }
    let target_reached = found >= required;
    let header = RunHeader {
        category_id: format!("cat{}", rng.random_range(0..5)),
        config: RunConfig::new(workflow, FeatureMode::Bm25),
        seed_docs: [ids[pos].clone(), ids[neg].clone()],
        collection_size: n,
        total_positives: n_rel,
        required_positives: required,
        stop_reason: if target_reached { StopReason::TargetReached } else { StopReason::MaxIterations },
        target_reached,
    };
    Generated { record: RunRecord { header, iterations }, relevant }
}

/// Sector costs at iteration `t`, recounted from the batch lists.
fn naive_entry(g: &Generated, t: usize, cs: &CostStructure) -> [f64; 6] {
    let (mut pos, mut neg) = (0usize, 0usize);
    for it in &g.record.iterations[..=t] {
        for id in &it.batch {
            if g.relevant.contains(id) {
                pos += 1;
            } else {
                neg += 1;
            }
        }
    }
    let it = &g.record.iterations[t];
    let (p2_pos, p2_neg, flag) = match g.record.header.config.workflow {
        Workflow::OnePhase => (0, 0, pos >= g.record.header.required_positives),
        Workflow::TwoPhase => {
            let depth = it.second_phase_depth.unwrap();
            let p = it.second_phase_positives.unwrap();
            (p, depth - p, depth == 0)
        }
    };
    let sectors = [
        pos as f64 * cs.phase1_pos,
        neg as f64 * cs.phase1_neg,
        p2_pos as f64 * cs.phase2_pos,
        p2_neg as f64 * cs.phase2_neg,
    ];
    let total = sectors[0] + sectors[1] + sectors[2] + sectors[3];
    [sectors[0], sectors[1], sectors[2], sectors[3], total, if flag { 1.0 } else { 0.0 }]
}

fn cost_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let structures = [
        CostStructure::uniform(),
        CostStructure::expensive_training(),
        CostStructure { phase1_pos: 3.5, phase1_neg: 0.25, phase2_pos: 1.75, phase2_neg: 0.5 },
    ];
    let (mut unreached, mut compared) = (0, 0);
    let mut costs = Vec::new();
    for k in 0..100 {
        let workflow = if k % 2 == 0 { Workflow::OnePhase } else { Workflow::TwoPhase };
        let g = random_record(&mut rng, workflow);
        for cs in &structures {
            let table = cost_dynamics_table(&g.record, cs).map_err(|e| format!("record {k}: {e}"))?;
            check(table.entries.len() == g.record.iterations.len(), || format!("record {k}: table length"))?;
            let mut best: Option<(f64, usize)> = None;
            for t in 0..g.record.iterations.len() {
                let naive = naive_entry(&g, t, cs);
                let e = iteration_cost(&g.record, t, cs).map_err(|e| e.to_string())?;
                let got = [e.p1_pos, e.p1_neg, e.p2_pos, e.p2_neg, e.total, if e.depth_zero { 1.0 } else { 0.0 }];
                check(got == naive, || format!("record {k} iteration {t}: {got:?} != {naive:?}"))?;
                check(table.entries[t] == e, || format!("record {k} iteration {t}: dynamics row differs"))?;
                if best.is_none_or(|(b, _)| naive[4] < b) {
                    best = Some((naive[4], t));
                }
                compared += 1;
            }
            let last = g.record.iterations.len() - 1;
            let expected = match workflow {
                Workflow::OnePhase if g.record.header.target_reached => Ok((naive_entry(&g, last, cs)[4], last)),
                Workflow::OnePhase => Err(()),
                Workflow::TwoPhase => Ok(best.unwrap()),
            };
            match (optimal_cost(&g.record, cs), expected) {
                (Ok(got), Ok(want)) => check(got == want, || format!("record {k}: optimal {got:?} != {want:?}"))?,
                (Err(CostError::TargetNotReached { .. }), Err(())) => unreached += 1,
                (got, want) => return Err(format!("record {k}: optimal {got:?} vs expected {want:?}")),
            }
        }
        if let Ok((cost, _)) = optimal_cost(&g.record, &structures[0]) {
            costs.push(RunCost { category: g.record.header.category_id.clone(), seed_set: k, cost });
        }
    }
    let self_relative = relative_cost(&costs, &costs).map_err(|e| e.to_string())?;
    check(self_relative == 1.0, || format!("baseline vs itself = {self_relative}"))?;
    let elapsed = start.elapsed();
    within(elapsed, 5)?;
    Ok(format!(
        "100 records, {compared} iteration costs exact, {unreached} unreached one-phase runs rejected, self-relative {self_relative:.4}, {elapsed:.1?}"
    ))
}

// ----------------------------------------------------------------- depth

fn exhaustive_depth(
    scored: &[(usize, f64)],
    found: usize,
    total: usize,
    target: f64,
    positive: &BTreeSet<usize>,
) -> Option<SecondPhase> {
    let required = brute_required(total, target);
    // rank = number of documents strictly ahead under (-score, row)
    let rank: Vec<usize> =
        scored.iter().map(|&(r, s)| scored.iter().filter(|&&(r2, s2)| s2 > s || (s2 == s && r2 < r)).count()).collect();
    for depth in 0..=scored.len() {
        let positives = scored.iter().zip(&rank).filter(|(&(r, _), &k)| k < depth && positive.contains(&r)).count();
        if found + positives >= required {
            return Some(SecondPhase { depth, positives });
        }
    }
    None
}

fn depth_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut none = 0;
    for k in 0..1000 {
        let n = rng.random_range(1..=200);
        let levels = [2.0, 10.0, 1000.0][rng.random_range(0..3)];
        let mut rows: Vec<usize> = (0..n * 2).collect();
        rows.shuffle(&mut rng);
        rows.truncate(n);
        let scored: Vec<(usize, f64)> =
            rows.iter().map(|&r| (r, (rng.random::<f64>() * levels).floor() / levels)).collect();
        let positive: BTreeSet<usize> = rows.iter().copied().filter(|_| rng.random_bool(0.3)).collect();
        let found = rng.random_range(0..20);
        let missing = if rng.random_bool(0.2) { rng.random_range(1..10) } else { 0 };
        let total = (found + positive.len() + missing).max(1);
        let target = if rng.random_bool(0.5) {
            [0.5, 0.8, 0.9, 1.0][rng.random_range(0..4)]
        } else {
            rng.random_range(0.05..1.0)
        };

        let got = rank_depth_to_target(&scored, found, total, target, |r| positive.contains(&r));
        let want = exhaustive_depth(&scored, found, total, target, &positive);
        check(got == want, || format!("config {k}: {got:?} != {want:?}"))?;
        let recall_met = found as f64 / total as f64 >= target;
        check(got.is_some_and(|p| p.depth == 0) == recall_met, || {
            format!("config {k}: depth 0 vs recall {recall_met}")
        })?;
        none += usize::from(got.is_none());
    }

    // the same equivalence on records produced by the review loop
    let corpus = signature_corpus(&SignatureSpec { n_docs: 300, n_relevant: 30, ..SignatureSpec::default() });
    let coll = corpus.collection(&TokenizerConfig::default()).unwrap();
    let (m, _) = encode_bm25(&coll, Bm25Params::default()).unwrap();
    let cat = coll.category("synthetic").unwrap();
    let mut checked = 0;
    for (i, seeds) in seed_sets(&coll, cat, 0, 3).unwrap().into_iter().enumerate() {
        let mut cfg = RunConfig::new(Workflow::TwoPhase, FeatureMode::Bm25);
        cfg.batch_size = 10;
        cfg.seed_set_id = i as u32;
        let rec = run_tar(&cfg, &coll, cat, seeds, &FeatureSet { bm25: Some(&m), splade: None }).unwrap();
        for it in &rec.iterations {
            let met = it.cumulative_positives as f64 / cat.total_positives() as f64 >= cfg.recall_target;
            check((it.second_phase_depth == Some(0)) == met, || format!("run {i} iteration {}", it.iteration))?;
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, 5)?;
    Ok(format!("1000 configurations ({none} unreachable) match the exhaustive scan, {checked} run iterations consistent, {elapsed:.1?}"))
}

// ------------------------------------------------------------ end to end

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let corpus = signature_corpus(&SignatureSpec::default());
    let coll = corpus.collection(&TokenizerConfig::default()).unwrap();
    let cat = coll.category("synthetic").unwrap();
    check(coll.len() == 2000 && cat.total_positives() == 100, || "unexpected corpus shape".into())?;
    let (m, _) = encode_bm25(&coll, Bm25Params::default()).unwrap();
    let features = FeatureSet { bm25: Some(&m), splade: None };
    let seeds = seed_sets(&coll, cat, 0, 10).unwrap();
    let reviewed = |strategy: Strategy| -> Result<Vec<usize>, String> {
        seeds
            .iter()
            .enumerate()
            .map(|(i, &pair)| {
                let mut cfg = RunConfig::new(Workflow::OnePhase, FeatureMode::Bm25);
                cfg.strategy = strategy;
                cfg.seed_set_id = i as u32;
                cfg.rng_seed = sampling_seed(0, "synthetic", i as u32);
                let rec = run_tar(&cfg, &coll, cat, pair, &features).map_err(|e| e.to_string())?;
                check(rec.header.target_reached, || format!("seed set {i} did not reach the target"))?;
                Ok(rec.iterations.last().unwrap().cumulative_reviewed)
            })
            .collect()
    };
    let relevance = reviewed(Strategy::Relevance)?;
    let random = reviewed(Strategy::Random)?;
    let elapsed = start.elapsed();
    let under_half = relevance.iter().filter(|&&r| r * 2 <= coll.len()).count();
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    check(under_half >= 9, || format!("only {under_half}/10 seed sets reviewed <= 50%: {relevance:?}"))?;
    check(mean(&relevance) < mean(&random), || {
        format!("relevance {} not below random {}", mean(&relevance), mean(&random))
    })?;
    within(elapsed, 60)?;
    Ok(format!(
        "{under_half}/10 seed sets <= 50% reviewed, mean reviewed relevance {:.1} vs random {:.1}, {elapsed:.1?}",
        mean(&relevance),
        mean(&random)
    ))
}

// ---------------------------------------------------------------- fusion

fn fusion_direction() -> Outcome {
    let start = Instant::now();
    let corpus = complementary_corpus(&ComplementarySpec::default());
    let coll = corpus.collection(&TokenizerConfig::default()).unwrap();
    let cat = coll.category("synthetic").unwrap();
    let (bm25, _) = encode_bm25(&coll, Bm25Params::default()).unwrap();
    let splade = corpus.vector_matrix().unwrap();
    let features = FeatureSet { bm25: Some(&bm25), splade: Some(&splade) };
    let seeds = seed_sets(&coll, cat, 0, 10).unwrap();
    let mut summary = Vec::new();
    for (workflow, cs) in
        [(Workflow::OnePhase, CostStructure::uniform()), (Workflow::TwoPhase, CostStructure::expensive_training())]
    {
        let mut means = Vec::new();
        for mode in [FeatureMode::Bm25, FeatureMode::Splade, FeatureMode::Fused] {
            let mut total = 0.0;
            for (i, &pair) in seeds.iter().enumerate() {
                let mut cfg = RunConfig::new(workflow, mode);
                cfg.seed_set_id = i as u32;
                cfg.rng_seed = sampling_seed(0, "synthetic", i as u32);
                let rec = run_tar(&cfg, &coll, cat, pair, &features).map_err(|e| e.to_string())?;
                total += optimal_cost(&rec, &cs).map_err(|e| e.to_string())?.0;
            }
            means.push(total / seeds.len() as f64);
        }
        let [b, s, f] = [means[0], means[1], means[2]];
        check(f <= b && f <= s, || format!("{workflow}: fused {f} vs bm25 {b}, splade {s}"))?;
        summary.push(format!("{workflow} bm25 {b:.1} splade {s:.1} fused {f:.1}"));
    }
    let elapsed = start.elapsed();
    within(elapsed, 120)?;
    Ok(format!("mean optimal cost: {}, {elapsed:.1?}", summary.join("; ")))
}

// ----------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let start = Instant::now();
    let spec = ComplementarySpec {
        text: SignatureSpec { n_docs: 400, n_relevant: 40, ..SignatureSpec::default() },
        vector_vocab: 512,
        vector_nnz: 30,
        ..ComplementarySpec::default()
    };
    let corpus = complementary_corpus(&spec);
    let coll = corpus.collection(&TokenizerConfig::default()).unwrap();
    let cat = coll.category("synthetic").unwrap();
    let (bm25, _) = encode_bm25(&coll, Bm25Params::default()).unwrap();
    let splade = corpus.vector_matrix().unwrap();
    let features = FeatureSet { bm25: Some(&bm25), splade: Some(&splade) };
    let seeds = seed_sets(&coll, cat, 5, 2).unwrap();
    let mut repeated = 0;
    for workflow in [Workflow::OnePhase, Workflow::TwoPhase] {
        for mode in [FeatureMode::Bm25, FeatureMode::Splade, FeatureMode::Fused] {
            for strategy in [Strategy::Relevance, Strategy::Uncertainty, Strategy::Random] {
                let mut cfg = RunConfig::new(workflow, mode);
                cfg.strategy = strategy;
                cfg.batch_size = 25;
                cfg.rng_seed = sampling_seed(5, "synthetic", 1);
                cfg.seed_set_id = 1;
                let a = run_tar(&cfg, &coll, cat, seeds[1], &features).unwrap().to_jsonl_string();
                let b = run_tar(&cfg, &coll, cat, seeds[1], &features).unwrap().to_jsonl_string();
                check(a == b, || format!("{workflow}/{mode}/{strategy} differs between repeats"))?;
                repeated += 1;
            }
        }
    }

    // the full grid, executed with different worker counts
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    corpus.write_corpus(std::fs::File::create(dir.join("corpus.jsonl")).unwrap()).unwrap();
    corpus.write_qrels(std::fs::File::create(dir.join("qrels.txt")).unwrap()).unwrap();
    corpus.write_vectors(std::fs::File::create(dir.join("vectors.jsonl")).unwrap()).unwrap();
    let mut config = ExperimentConfig::new(dir.join("corpus.jsonl"), dir.join("qrels.txt"));
    config.splade_vectors = Some(dir.join("vectors.jsonl"));
    config.splade = SpladeOptions { vocab_size: spec.vector_vocab, ..SpladeOptions::default() };
    config.feature_modes = vec![FeatureMode::Bm25, FeatureMode::Splade, FeatureMode::Fused];
    config.batch_size = 25;
    let mut dirs = Vec::new();
    for workers in [1, 4] {
        config.parallelism = Some(workers);
        config.output_dir = dir.join(format!("w{workers}"));
        let summary = runner::run_experiment(&config).map_err(|e| e.to_string())?;
        check(summary.failed.is_empty(), || format!("failed runs {:?}", summary.failed))?;
        dirs.push(config.output_dir.clone());
    }
    let manifest = runner::Manifest::load(&dirs[0]).unwrap();
    let mut records = Vec::new();
    for (id, entry) in &manifest.runs {
        let rel = entry.record.as_ref().unwrap();
        let a = std::fs::read(dirs[0].join(rel)).unwrap();
        let b = std::fs::read(dirs[1].join(rel)).unwrap();
        check(a == b, || format!("{id} differs between 1 and 4 workers"))?;
        records.push((entry.run.clone(), runner::read_record(&dirs[0].join(rel)).unwrap()));
    }

    // every run of a seed set starts from the same two documents
    let mut seed_docs: Vec<BTreeSet<[String; 2]>> = vec![BTreeSet::new(); config.seed_sets as usize];
    for (run, rec) in &records {
        seed_docs[run.seed_set as usize].insert(rec.header.seed_docs.clone());
    }
    check(seed_docs.iter().all(|s| s.len() == 1), || "seed documents differ across modes or workflows".into())?;
    let distinct: BTreeSet<_> = seed_docs.iter().map(|s| s.iter().next().unwrap().clone()).collect();
    let elapsed = start.elapsed();
    Ok(format!(
        "{repeated} repeated runs byte-identical, {} grid records identical across worker counts, 10 seed sets shared by all 6 mode/workflow arms ({} distinct pairs), {elapsed:.1?}",
        records.len(),
        distinct.len()
    ))
}

// -------------------------------------------------------------- defaults

fn protocol_defaults() -> Outcome {
    let config = ExperimentConfig::new("c", "q");
    let run = RunConfig::new(Workflow::OnePhase, FeatureMode::Bm25);
    let et = CostStructure::expensive_training();
    let u = CostStructure::uniform();
    let checks: [(&str, bool); 10] = [
        ("batch size constant 200", DEFAULT_BATCH_SIZE == 200),
        ("run config batch size 200", run.batch_size == 200),
        ("experiment batch size 200", config.batch_size == 200),
        ("recall target 0.8", DEFAULT_RECALL_TARGET == 0.8 && run.recall_target == 0.8 && config.recall_target == 0.8),
        ("top-s 3052 for vocab 30522", default_top_s(30522) == 3052),
        ("splade options top-s", SPLADE_VOCAB_SIZE == 30522 && SpladeOptions::default().effective_top_s() == 3052),
        ("expensive training multiplier 10", TRAINING_COST_MULTIPLIER == 10.0),
        (
            "expensive training 10x phase two",
            et.phase1_pos == 10.0 * et.phase2_pos && et.phase1_neg == 10.0 * et.phase2_neg,
        ),
        ("uniform costs equal", [u.phase1_pos, u.phase1_neg, u.phase2_pos, u.phase2_neg] == [1.0; 4]),
        ("ten seed sets", DEFAULT_SEED_SETS == 10 && config.seed_sets == 10),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(name, _)| *name).collect();
    check(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    Ok("batch 200, recall 0.8, top-s 3052 of 30522, training multiplier 10, 10 seed sets".into())
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 7] = [
        ("solver correctness", solver_correctness),
        ("cost-formula oracle", cost_oracle),
        ("two-phase depth oracle", depth_oracle),
        ("end-to-end synthetic review", end_to_end),
        ("fusion direction", fusion_direction),
        ("determinism and shared seeds", determinism),
        ("protocol defaults", protocol_defaults),
    ];
    let mut failures = 0;
    for (name, criterion) in criteria {
        match criterion() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
