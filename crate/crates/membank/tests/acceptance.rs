//! Acceptance gate: one test per criterion, each printing a single
//! `criterion NN: PASS/FAIL | detail` line (visible with --nocapture or on
//! failure) and asserting the pinned bound.
//!
//! The training-based criteria (02-05) share lazily trained models; the
//! first test to need one trains it, the rest reuse it. Every tolerance is
//! a named constant here, not a tunable.

mod common;

use indexmap::IndexSet;
use membank::autodiff::{ParamStore, Shape, StMode, Tape};
use membank::decoder::BankSpan;
use membank::harness::{
    evaluate, metrics_jsonl, model_from_checkpoint, required_banks, train, Config,
    RequiredBanksReport,
};
use membank::loss::{bank_loss, strength_loss, BankPrior};
use membank::memory::{
    pi_move, pi_new, propagation_aggregate, ControllerPolicy, Entity, Memory, MemoryBank,
    MemoryParams, SemanticGraph, StepOptions,
};
use membank::tasks::{generate, split, TaskKind, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

// ── Pinned bounds ──────────────────────────────────────────────────────

/// 01: worst relative error for reverse-mode vs central differences.
const GRADIENT_TOLERANCE_NOTE: f64 = 1e-4; // enforced inside common::fd_cases
/// 01: seeds the whole case list runs over, and its time budget.
const GRADIENT_SEEDS: u64 = 100;
const GRADIENT_TIME_BUDGET: Duration = Duration::from_secs(60);
/// 02: test error bound on the base task.
const BASE_ERROR_BOUND: f64 = 0.05;
/// 03: bank-creation window and the bank-count accuracy threshold.
const BANKS_CREATED_RANGE: (f64, f64) = (1.0, 5.0);
const REQUIRED_BANKS_THRESHOLD: f64 = 0.95;
/// 04: entity-ratio cap on the scaled task (must also undercut base).
const SCALED_RATIO_CAP: f64 = 0.5;
/// 05: largest allowed ratio increase when asking three questions.
const MULTI_QUESTION_RATIO_SLACK: f64 = 0.3;
/// 07: exactness bound for propagation vs walk enumeration.
const PROPAGATION_EXACTNESS: f64 = 1e-10;
/// 08: random reachability trials.
const REACHABILITY_TRIALS: usize = 500;
/// 09: KL-at-equality bound and random-pair count.
const KL_EQUALITY_BOUND: f64 = 1e-9;
const KL_PAIRS: usize = 10_000;

fn report(criterion: usize, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion:02}: {status} | {detail}");
    assert!(pass, "criterion {criterion:02} failed: {detail}");
}

// ── Shared trained models ──────────────────────────────────────────────

struct TrainedRun {
    seed_used: u64,
    val_accuracy: f64,
    test_accuracy: f64,
    test_mean_banks: f64,
    required: RequiredBanksReport,
    epochs_run: usize,
    elapsed: Duration,
}

/// Train `cfg` over each seed, keep the best validation model, and
/// evaluate it on the held-out test split.
fn train_best(spec: &TaskSpec, cfg: &Config, seeds: &[u64]) -> TrainedRun {
    let (examples, vocab) = generate(spec).unwrap();
    let (train_set, val_set, test_set) =
        split(&examples, (0.8, 0.1, 0.1), cfg.seed).unwrap();
    let started = Instant::now();
    let mut best: Option<(f64, u64, membank::harness::TrainOutcome)> = None;
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let out = train(&c, &train_set, &val_set, &vocab).unwrap();
        let acc = out.summary.val_accuracy;
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, seed, out));
        }
    }
    let (val_accuracy, seed_used, out) = best.unwrap();
    let elapsed = started.elapsed();
    let (model, store) = model_from_checkpoint(&out.checkpoint).unwrap();
    let stats = evaluate(&model, &store, &test_set, BankSpan::All, cfg.seed).unwrap();
    let required = required_banks(
        &model,
        &store,
        &test_set,
        REQUIRED_BANKS_THRESHOLD,
        cfg.seed,
    )
    .unwrap();
    TrainedRun {
        seed_used,
        val_accuracy,
        test_accuracy: stats.accuracy,
        test_mean_banks: stats.mean_banks,
        required,
        epochs_run: out.rows.len(),
        elapsed,
    }
}

fn base_run() -> &'static TrainedRun {
    static BASE: OnceLock<TrainedRun> = OnceLock::new();
    BASE.get_or_init(|| {
        let spec = TaskSpec {
            kind: TaskKind::SingleSupportingFact,
            entities: 8,
            length: 6,
            questions: 1,
            stories: 2000,
            seed: 0,
        };
        let cfg = Config { hidden: 32, lr: 0.01, plateau_patience: 12, ..Config::default() };
        train_best(&spec, &cfg, &[0, 1, 2])
    })
}

fn scaled_run() -> &'static TrainedRun {
    static SCALED: OnceLock<TrainedRun> = OnceLock::new();
    SCALED.get_or_init(|| {
        let spec = TaskSpec {
            kind: TaskKind::SingleSupportingFact,
            entities: 100,
            length: 90,
            questions: 1,
            stories: 200,
            seed: 0,
        };
        let cfg = Config {
            hidden: 32,
            lr: 0.01,
            plateau_patience: 12,
            beta: 0.004,
            ..Config::default()
        };
        train_best(&spec, &cfg, &[0])
    })
}

fn multi_question_run() -> &'static TrainedRun {
    static MULTI: OnceLock<TrainedRun> = OnceLock::new();
    MULTI.get_or_init(|| {
        let spec = TaskSpec {
            kind: TaskKind::SingleSupportingFact,
            entities: 8,
            length: 6,
            questions: 3,
            stories: 1000,
            seed: 0,
        };
        let cfg = Config { hidden: 32, lr: 0.01, plateau_patience: 12, ..Config::default() };
        train_best(&spec, &cfg, &[0])
    })
}

// ── Criteria ───────────────────────────────────────────────────────────

#[test]
fn test_criterion_01_gradients_match_finite_differences_quickly() {
    let started = Instant::now();
    common::fd_cases::run_all(0..GRADIENT_SEEDS);
    let elapsed = started.elapsed();
    let pass = elapsed < GRADIENT_TIME_BUDGET;
    report(
        1,
        pass,
        &format!(
            "all op and composed-graph checks within {GRADIENT_TOLERANCE_NOTE:.0e} over \
             {GRADIENT_SEEDS} seeds in {elapsed:.2?} (budget {GRADIENT_TIME_BUDGET:?})"
        ),
    );
}

#[test]
fn test_criterion_02_base_task_test_error() {
    let run = base_run();
    let error = 1.0 - run.test_accuracy;
    let pass = error < BASE_ERROR_BOUND;
    report(
        2,
        pass,
        &format!(
            "test error {error:.4} (bound {BASE_ERROR_BOUND}), best seed {} of 3, \
             {} epochs, val acc {:.4}, wall time {:.1?} (target 30 min)",
            run.seed_used, run.epochs_run, run.val_accuracy, run.elapsed
        ),
    );
}

#[test]
fn test_criterion_03_bank_behavior_on_base_task() {
    let run = base_run();
    let banks_ok = run.test_mean_banks >= BANKS_CREATED_RANGE.0
        && run.test_mean_banks <= BANKS_CREATED_RANGE.1;
    let required_ok = run.required.reached && run.required.k == 1;
    report(
        3,
        banks_ok && required_ok,
        &format!(
            "mean banks created {:.2} (window [{}, {}]), required banks {} at threshold \
             {REQUIRED_BANKS_THRESHOLD} (reached: {})",
            run.test_mean_banks,
            BANKS_CREATED_RANGE.0,
            BANKS_CREATED_RANGE.1,
            run.required.k,
            run.required.reached
        ),
    );
}

#[test]
fn test_criterion_04_scaled_task_entity_ratio_reduction() {
    let base = base_run();
    let scaled = scaled_run();
    let pass = scaled.required.examined_ratio < base.required.examined_ratio
        && scaled.required.examined_ratio <= SCALED_RATIO_CAP;
    report(
        4,
        pass,
        &format!(
            "entity ratio {:.4} at {} bank(s) on the scaled task vs {:.4} on base \
             (cap {SCALED_RATIO_CAP}); scaled test acc {:.4}",
            scaled.required.examined_ratio,
            scaled.required.k,
            base.required.examined_ratio,
            scaled.test_accuracy
        ),
    );
}

#[test]
fn test_criterion_05_multi_question_required_banks_and_ratio() {
    let base = base_run();
    let multi = multi_question_run();
    let increase = multi.required.examined_ratio - base.required.examined_ratio;
    let pass = multi.required.reached
        && multi.required.k == 1
        && increase <= MULTI_QUESTION_RATIO_SLACK;
    report(
        5,
        pass,
        &format!(
            "three questions per story: required banks {} (reached: {}), entity ratio \
             {:.4} vs single-question {:.4} (increase {increase:+.4}, slack \
             {MULTI_QUESTION_RATIO_SLACK})",
            multi.required.k,
            multi.required.reached,
            multi.required.examined_ratio,
            base.required.examined_ratio
        ),
    );
}

#[test]
fn test_criterion_06_discrete_gate_gradient_contract() {
    let prior = BankPrior::default();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = 4 + (seed as usize % 2) * 4;
        let mut store = ParamStore::new();
        let params = MemoryParams::init(&mut store, hidden, &mut rng);

        // Random nonempty bank.
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, &store);
        let mut memory = Memory::new();
        let n = 1 + rng.gen_range(0..4);
        for w in 0..n {
            let state = tape.leaf(
                Shape::Vector(hidden),
                (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let strength = tape.leaf(
                Shape::Vector(hidden),
                (0..hidden).map(|_| rng.gen_range(0.05..0.95)).collect(),
            );
            memory.banks[0].entities.insert(w, Entity { word: w, state, strength });
        }
        let p = pi_new(&mut tape, &vars, &memory, hidden);
        let t = 1 + (seed as usize % 5);

        // The drawn gate output is a detached leaf: even a loss that
        // consumes the draw sends nothing back through it into p.
        let d = tape.bernoulli_st(p, StMode::Sample, &mut rng);
        let aux = tape.leaf(Shape::Vector(1), vec![0.7]);
        let through_sample = tape.hadamard(d, aux);
        let lb = bank_loss(&mut tape, p, t, &prior);
        let total = tape.add(lb, through_sample);
        tape.backward(total);
        let d_val = tape.value_scalar(d);
        assert!(d_val == 0.0 || d_val == 1.0, "gate draw must be 0/1, got {d_val}");
        let grad_p_with_consumer = tape.grad(p).map(|g| g.to_vec());

        let mut tape2 = Tape::new();
        let vars2 = params.bind(&mut tape2, &store);
        let mut memory2 = Memory::new();
        for (&w, e) in &memory.banks[0].entities {
            let state = tape2.leaf(Shape::Vector(hidden), tape.value(e.state).to_vec());
            let strength = tape2.leaf(Shape::Vector(hidden), tape.value(e.strength).to_vec());
            memory2.banks[0].entities.insert(w, Entity { word: w, state, strength });
        }
        let p2 = pi_new(&mut tape2, &vars2, &memory2, hidden);
        let lb2 = bank_loss(&mut tape2, p2, t, &prior);
        tape2.backward(lb2);
        let grad_p_alone = tape2.grad(p2).map(|g| g.to_vec());
        assert_eq!(
            grad_p_with_consumer, grad_p_alone,
            "seed {seed}: consuming the gate draw changed the gradient of p"
        );

        // The growth-gate weights receive gradient whenever p differs
        // from the prior target.
        let target = prior.target(t);
        let p_val = tape2.value_scalar(p2);
        if (p_val - target).abs() > 1e-6 {
            tape2.export_grads(&mut store);
            let gw = store.get("ctrl.new_w").grad.as_ref();
            let gb = store.get("ctrl.new_b").grad.as_ref();
            assert!(
                gw.is_some_and(|g| g.iter().any(|&x| x != 0.0)),
                "seed {seed}: no gradient into the growth-gate weights (p={p_val}, target={target})"
            );
            assert!(
                gb.is_some_and(|g| g.iter().any(|&x| x != 0.0)),
                "seed {seed}: no gradient into the growth-gate bias"
            );
            store.zero_grads();
        }
    }
    report(6, true, "gate draw is 0/1 and detached; growth-gate weights get gradient whenever p differs from the prior target (50 random configurations)");
}

#[test]
fn test_criterion_07_propagation_matches_walk_enumeration() {
    let hidden = 2;
    let mut worst: f64 = 0.0;
    let mut graphs = 0usize;
    for n in 1..=4usize {
        let bits = n * n;
        for mask in 0u32..(1 << bits) {
            let adj: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| f64::from(mask >> (i * n + j) & 1)).collect())
                .collect();
            let adj_bool: Vec<Vec<bool>> =
                adj.iter().map(|row| row.iter().map(|&x| x != 0.0).collect()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from(mask) * 31 + n as u64);
            let states: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            graphs += 1;
            for r in 1..=3usize {
                let mut tape = Tape::new();
                let vars: Vec<Option<_>> = states
                    .iter()
                    .map(|s| Some(tape.leaf(Shape::Vector(hidden), s.clone())))
                    .collect();
                let got = propagation_aggregate(&mut tape, &adj, &vars, hidden, r, true);
                let lengths: Vec<usize> = (1..=r).collect();
                let want = common::walk_sums(&adj_bool, &states, &lengths);
                for (node, var) in got.iter().enumerate() {
                    for (a, b) in tape.value(*var).iter().zip(&want[node]) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
    }
    let pass = worst <= PROPAGATION_EXACTNESS;
    report(
        7,
        pass,
        &format!(
            "propagation equals walk enumeration on all {graphs} directed graphs with <= 4 \
             nodes, hop counts 1..=3; worst absolute deviation {worst:.2e} \
             (bound {PROPAGATION_EXACTNESS:.0e})"
        ),
    );
}

#[test]
fn test_criterion_08_moved_subgraph_preserves_reachability() {
    let opts = StepOptions::default();
    for trial in 0..REACHABILITY_TRIALS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let n = rng.gen_range(2..=8usize);
        let words: Vec<usize> = (1..=n).collect();
        let mut graph = SemanticGraph::new();
        let mut adj = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.gen_bool(0.3) {
                    adj[i][j] = true;
                    graph.extend(&[words[i], words[j]]);
                }
            }
        }
        // Random member subset forced across by the move gate.
        let subset: Vec<usize> =
            words.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();

        let mut tape = Tape::new();
        let mut memory = Memory::new();
        for &w in &words {
            let state = tape.leaf(Shape::Vector(2), vec![rng.gen_range(-1.0..1.0); 2]);
            let strength = tape.leaf(Shape::Vector(2), vec![rng.gen_range(0.0..1.0); 2]);
            memory.banks[0].entities.insert(w, Entity { word: w, state, strength });
        }
        memory.banks.push(MemoryBank::new());
        let policy =
            ControllerPolicy::Scripted { new_bank: vec![], moves: vec![subset.clone()] };
        pi_move(&mut tape, &mut memory, &graph, 0, 0, &policy, &opts, &mut rng);

        let members: IndexSet<usize> = memory.banks[1].words().collect();
        assert_eq!(
            members,
            subset.iter().copied().collect::<IndexSet<usize>>(),
            "trial {trial}: moved set mismatch"
        );
        // One-or-more-edge reachability oracle on the base graph.
        let path_reachable = |u: usize, v: usize| -> bool {
            let ui = u - 1;
            (0..n).any(|m| adj[ui][m] && common::reachable(&adj, m, v - 1))
        };
        for &u in &subset {
            for &v in &subset {
                let in_view = memory.banks[1].view_edges.contains(&(u, v));
                let in_base = path_reachable(u, v);
                assert_eq!(
                    in_view, in_base,
                    "trial {trial}: pair ({u},{v}) view={in_view} base={in_base}"
                );
            }
        }
    }
    report(
        8,
        true,
        &format!(
            "moved subsets mirror base-graph reachability exactly over \
             {REACHABILITY_TRIALS} random graphs with <= 8 nodes"
        ),
    );
}

#[test]
fn test_criterion_09_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_eq: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for _ in 0..KL_PAIRS {
        let s: f64 = rng.gen_range(0.0..=1.0);
        let t: f64 = rng.gen_range(0.0..=1.0);

        let mut tape = Tape::new();
        let sv = tape.leaf(Shape::Vector(1), vec![s]);
        let eq = strength_loss(&mut tape, &[sv], &[s]);
        worst_eq = worst_eq.max(tape.value_scalar(eq).abs());
        let ne = strength_loss(&mut tape, &[sv], &[t]);
        min_kl = min_kl.min(tape.value_scalar(ne));

        let p_hat = rng.gen_range(0.05..0.999);
        let beta = rng.gen_range(0.001..1.0);
        let step = rng.gen_range(1..40usize);
        let prior = BankPrior::new(p_hat, beta);
        let target = prior.target(step);
        let pv = tape.leaf(Shape::Vector(1), vec![target]);
        let eq_b = bank_loss(&mut tape, pv, step, &prior);
        worst_eq = worst_eq.max(tape.value_scalar(eq_b).abs());
        let qv = tape.leaf(Shape::Vector(1), vec![rng.gen_range(0.0..=1.0)]);
        let ne_b = bank_loss(&mut tape, qv, step, &prior);
        min_kl = min_kl.min(tape.value_scalar(ne_b));
    }
    let eq_ok = worst_eq < KL_EQUALITY_BOUND;
    let nonneg_ok = min_kl >= -1e-12;

    // The growth prior's target must rise with the sentence step whenever
    // the saturation probability is below 1.
    let mut monotone = true;
    for &(p_hat, beta) in &[(0.8, 0.1), (0.5, 0.05), (0.99, 0.3), (0.8, 0.004)] {
        let prior = BankPrior::new(p_hat, beta);
        for t in 1..60 {
            if prior.target(t + 1) <= prior.target(t) {
                monotone = false;
            }
        }
    }
    report(
        9,
        eq_ok && nonneg_ok && monotone,
        &format!(
            "both divergences: |at equality| <= {worst_eq:.2e} (bound {KL_EQUALITY_BOUND:.0e}), \
             minimum over {KL_PAIRS} random pairs {min_kl:.2e} (>= 0); growth target strictly \
             increasing in the step: {monotone}"
        ),
    );
}

#[test]
fn test_criterion_10_scripted_scenario_memory_layout() {
    let out = common::scenario::run();
    let got: IndexSet<&str> = out.second_bank.iter().map(|s| s.as_str()).collect();
    let want: IndexSet<&str> = ["john", "apple", "garden", "the"].into_iter().collect();
    let contents_ok = out.bank_count == 2 && got == want;
    let decode_ok = out.examined == 4 && out.examined < out.first_bank_len;
    report(
        10,
        contents_ok && decode_ok,
        &format!(
            "second bank holds exactly {:?}; newest-bank decode touches {} of the {} stored \
             words",
            out.second_bank, out.examined, out.first_bank_len
        ),
    );
}

#[test]
fn test_criterion_11_identical_runs_produce_bit_identical_metrics() {
    let spec = TaskSpec {
        kind: TaskKind::SingleSupportingFact,
        entities: 4,
        length: 3,
        questions: 1,
        stories: 24,
        seed: 5,
    };
    let (examples, vocab) = generate(&spec).unwrap();
    let cfg = Config {
        hidden: 8,
        epochs: 3,
        accumulation: 8,
        seed: 3,
        ..Config::default()
    };
    let render = || {
        let out = train(&cfg, &examples, &examples, &vocab).unwrap();
        metrics_jsonl(&out.rows, &out.summary).unwrap()
    };
    let first = render();
    let second = render();
    let pass = first == second;
    report(
        11,
        pass,
        &format!(
            "two identically seeded runs rendered {} identical metrics bytes",
            first.len()
        ),
    );
}
