//! Training objective: answer cross-entropy, per-sentence strength
//! supervision against sampled relevance targets, and a growth-rate
//! penalty tying the bank gate to a geometric schedule.
//!
//! Both supervision terms are Bernoulli KL divergences between scalars in
//! `[0,1]` (values clamped to `[EPS, 1-EPS]` first). Relevance targets are
//! drawn once per story: entities sharing an undirected component with
//! the answer draw from a high Gaussian and decay with hop distance (never
//! below the low-group mean); everything else draws from a low Gaussian.

use crate::autodiff::{Shape, Tape, Var};
use crate::encoder::WordId;
use crate::memory::SemanticGraph;
use crate::{Error, Result};
use indexmap::{IndexMap, IndexSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Clamp bound for probabilities entering a KL term.
pub const EPS: f64 = 1e-6;

const HIGH_MEAN: f64 = 0.75;
const HIGH_VAR: f64 = 0.05;
const LOW_MEAN: f64 = 0.3;
const LOW_VAR: f64 = 0.1;
const DISTANCE_DECAY: f64 = 0.9;

/// Per-entity expected scalar relevance in `[0,1]`.
#[derive(Clone, Debug)]
pub struct StrengthTarget {
    pub targets: IndexMap<WordId, f64>,
    pub answer_present: bool,
}

/// Parameters of the geometric bank-growth schedule.
#[derive(Clone, Copy, Debug)]
pub struct BankPrior {
    pub p_hat: f64,
    pub beta: f64,
}

impl BankPrior {
    pub fn new(p_hat: f64, beta: f64) -> Self {
        assert!(
            p_hat > 0.0 && p_hat <= 1.0 && beta > 0.0 && beta <= 1.0,
            "bank prior: p_hat and beta must lie in (0,1], got {p_hat}, {beta}"
        );
        BankPrior { p_hat, beta }
    }

    /// Gate target at 1-based sentence step `t`: `p_hat^(1/(beta*t))`.
    /// Increases toward 1 with `t` when `p_hat < 1`.
    pub fn target(&self, t: usize) -> f64 {
        assert!(t >= 1, "bank prior: sentence step is 1-based, got {t}");
        self.p_hat.powf(1.0 / (self.beta * t as f64))
    }
}

impl Default for BankPrior {
    fn default() -> Self {
        BankPrior { p_hat: 0.8, beta: 0.1 }
    }
}

/// Cross-entropy of the answer under the logits: `-log softmax(logits)[answer]`.
pub fn answer_loss(tape: &mut Tape, logits: Var, answer: WordId) -> Result<Var> {
    let len = tape.shape(logits).len();
    if answer >= len {
        return Err(Error::Config(format!(
            "answer id {answer} out of range for {len} logits"
        )));
    }
    let sm = tape.softmax(logits);
    let mut onehot = vec![0.0; len];
    onehot[answer] = 1.0;
    let mask = tape.leaf(Shape::Vector(len), onehot);
    let p = tape.dot(sm, mask);
    let p = tape.clamp(p, 1e-300, 1.0);
    let lp = tape.log(p);
    Ok(tape.scale_const(lp, -1.0))
}

/// Undirected hop distances from `sources` over the graph's edges.
fn undirected_distances(
    graph: &SemanticGraph,
    sources: &[WordId],
) -> IndexMap<WordId, usize> {
    let mut neighbors: IndexMap<WordId, IndexSet<WordId>> = IndexMap::new();
    for w in graph.nodes() {
        neighbors.entry(w).or_default();
    }
    for (u, v) in graph.edges() {
        neighbors.entry(u).or_default().insert(v);
        neighbors.entry(v).or_default().insert(u);
    }
    let mut dist: IndexMap<WordId, usize> = IndexMap::new();
    let mut frontier: Vec<WordId> = Vec::new();
    for &s in sources {
        if graph.has_node(s) && !dist.contains_key(&s) {
            dist.insert(s, 0);
            frontier.push(s);
        }
    }
    while let Some(u) = frontier.pop() {
        let d = dist[&u];
        let next: Vec<WordId> = neighbors[&u]
            .iter()
            .copied()
            .filter(|v| !dist.contains_key(v))
            .collect();
        for v in next {
            dist.insert(v, d + 1);
            frontier.insert(0, v);
        }
    }
    dist
}

/// Draw one relevance target per graph node. Nodes connected to any
/// answer (ignoring edge direction) draw from the high Gaussian and are
/// decayed by hop distance — multiplied by `0.9^hops`, never below the
/// low-group mean; unconnected nodes draw from the low Gaussian. All
/// targets are clamped into `[0,1]`. Answers absent from the graph are
/// logged and leave every node in the low group. Pure in
/// (graph, answers, seed): node order and one draw per node make replays
/// bit-identical.
pub fn expected_relevance(
    graph: &SemanticGraph,
    answers: &[WordId],
    seed: u64,
    weight_by_distance: bool,
) -> StrengthTarget {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let high = Normal::new(HIGH_MEAN, HIGH_VAR.sqrt()).unwrap();
    let low = Normal::new(LOW_MEAN, LOW_VAR.sqrt()).unwrap();
    let answer_present = answers.iter().any(|a| graph.has_node(*a));
    if !answer_present {
        log::warn!(
            "relevance targets: no answer id of {answers:?} appears in the story graph; \
             all {} entities fall in the low group",
            graph.node_count()
        );
    }
    let dist = undirected_distances(graph, answers);
    let mut targets = IndexMap::new();
    for w in graph.nodes() {
        let t = match dist.get(&w) {
            Some(&hops) => {
                let raw: f64 = high.sample(&mut rng).clamp(0.0, 1.0);
                if weight_by_distance {
                    (raw * DISTANCE_DECAY.powi(hops as i32)).max(LOW_MEAN)
                } else {
                    raw
                }
            }
            None => low.sample(&mut rng).clamp(0.0, 1.0),
        };
        targets.insert(w, t);
    }
    StrengthTarget { targets, answer_present }
}

/// Bernoulli KL `KL(s || t)` with both sides clamped to `[EPS, 1-EPS]`;
/// `t` is a constant.
fn bernoulli_kl_const(tape: &mut Tape, s: Var, t: f64) -> Var {
    let t = t.clamp(EPS, 1.0 - EPS);
    let s = tape.clamp(s, EPS, 1.0 - EPS);
    let one_minus_s = tape.one_minus(s);
    let ln_s = tape.log(s);
    let ln_1s = tape.log(one_minus_s);
    let ln_t = tape.scalar(t.ln());
    let ln_1t = tape.scalar((1.0 - t).ln());
    let da = tape.sub(ln_s, ln_t);
    let db = tape.sub(ln_1s, ln_1t);
    let ta = tape.hadamard(s, da);
    let tb = tape.hadamard(one_minus_s, db);
    tape.add(ta, tb)
}

/// Mean Bernoulli KL between per-entity scalar relevance summaries and
/// their targets. An empty entity list contributes zero.
pub fn strength_loss(tape: &mut Tape, summaries: &[Var], targets: &[f64]) -> Var {
    assert_eq!(
        summaries.len(),
        targets.len(),
        "strength loss: {} summaries vs {} targets",
        summaries.len(),
        targets.len()
    );
    if summaries.is_empty() {
        return tape.scalar(0.0);
    }
    let mut acc = None;
    for (&s, &t) in summaries.iter().zip(targets) {
        let kl = bernoulli_kl_const(tape, s, t);
        acc = Some(match acc {
            None => kl,
            Some(a) => tape.add(a, kl),
        });
    }
    tape.scale_const(acc.unwrap(), 1.0 / summaries.len() as f64)
}

/// Bernoulli KL between the growth-gate probability at 1-based sentence
/// step `t` and the schedule target `p_hat^(1/(beta*t))`.
pub fn bank_loss(tape: &mut Tape, p_new: Var, t: usize, prior: &BankPrior) -> Var {
    bernoulli_kl_const(tape, p_new, prior.target(t))
}

/// Story loss: answer term plus the per-sentence strength and growth
/// terms. Components are summed on tape; callers report them separately.
pub fn total_loss(tape: &mut Tape, answer: Var, per_sentence: &[(Var, Var)]) -> Var {
    let mut acc = answer;
    for &(ls, lb) in per_sentence {
        acc = tape.add(acc, ls);
        acc = tape.add(acc, lb);
    }
    acc
}
