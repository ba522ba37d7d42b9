//! Growable hierarchy of entity banks maintained per sentence over a
//! per-story word graph.
//!
//! Bank 0 holds every entity the story has mentioned; higher banks hold
//! copies of entities judged relevant to the question. Each sentence runs
//! the same body over every bank: absorb the sentence (`pi_au`), propagate
//! states along the graph (`pi_prop`), optionally copy entities one bank
//! up (`pi_move`), and re-score strengths against the question. A gate on
//! the last bank (`pi_new`) decides whether to grow the hierarchy; when it
//! fires, the body of the previously-last bank runs once more so the fresh
//! bank is populated within the same sentence.
//!
//! Discrete gate decisions go through a straight-through Bernoulli: the
//! 0/1 draw is detached, while the probability stays on the tape for the
//! growth-rate loss.

use crate::autodiff::{ParamStore, Shape, StMode, Tape, Var};
use crate::encoder::{initial_strength, sgru_step, SgruVars, WordId};
use crate::gru::{gru_step, xavier_normal, GruParams, GruVars};
use indexmap::{IndexMap, IndexSet};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// One stored entity: the word it names, its hidden state, and its
/// question-relevance strength (entrywise in `[0,1]`).
#[derive(Clone, Copy, Debug)]
pub struct Entity {
    pub word: WordId,
    pub state: Var,
    pub strength: Var,
}

/// An ordered set of entities keyed by word id (at most one entity per
/// word), plus the bank's shortcut edges (see [`Memory::refresh_view`]).
#[derive(Clone, Debug, Default)]
pub struct MemoryBank {
    pub entities: IndexMap<WordId, Entity>,
    pub view_edges: IndexSet<(WordId, WordId)>,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains(&self, word: WordId) -> bool {
        self.entities.contains_key(&word)
    }

    pub fn words(&self) -> impl Iterator<Item = WordId> + '_ {
        self.entities.keys().copied()
    }
}

/// The bank list. Bank 0 always exists; banks are only appended at the
/// tail and never removed.
#[derive(Clone, Debug)]
pub struct Memory {
    pub banks: Vec<MemoryBank>,
}

impl Default for Memory {
    fn default() -> Self {
        Memory { banks: vec![MemoryBank::new()] }
    }
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn last(&self) -> &MemoryBank {
        self.banks.last().expect("memory always has at least one bank")
    }

    /// Successors of `u` in bank `i`'s graph view. Bank 0 sees the whole
    /// base graph; higher banks see base edges between their own members
    /// plus their shortcut edges.
    fn view_successors(&self, graph: &SemanticGraph, i: usize, u: WordId) -> Vec<WordId> {
        if i == 0 {
            return graph.out_neighbors(u).collect();
        }
        let bank = &self.banks[i];
        let mut succ: IndexSet<WordId> = graph
            .out_neighbors(u)
            .filter(|v| bank.contains(*v))
            .collect();
        for &(a, b) in &bank.view_edges {
            if a == u {
                succ.insert(b);
            }
        }
        succ.into_iter().collect()
    }

    /// Whether a nonempty path leads from `from` to `to` inside bank `i`'s
    /// graph view (`from == to` requires a cycle).
    pub fn view_reachable(
        &self,
        graph: &SemanticGraph,
        i: usize,
        from: WordId,
        to: WordId,
    ) -> bool {
        let mut visited: IndexSet<WordId> = IndexSet::new();
        let mut frontier = self.view_successors(graph, i, from);
        while let Some(v) = frontier.pop() {
            if v == to {
                return true;
            }
            if visited.insert(v) {
                frontier.extend(self.view_successors(graph, i, v));
            }
        }
        false
    }

    /// Rebuild bank `upper`'s shortcut edges: one direct edge for every
    /// ordered pair of its members connected by a path in the view of the
    /// bank below. Reachability below only ever grows, so the rebuilt set
    /// contains the old one.
    fn refresh_view(&mut self, graph: &SemanticGraph, upper: usize) {
        assert!(upper >= 1, "refresh_view: bank 0 has no bank below");
        let members: Vec<WordId> = self.banks[upper].words().collect();
        let mut edges = IndexSet::new();
        for &u in &members {
            for &v in &members {
                if self.view_reachable(graph, upper - 1, u, v) {
                    edges.insert((u, v));
                }
            }
        }
        self.banks[upper].view_edges = edges;
    }
}

/// Directed word graph built per story: consecutive words in a sentence
/// are connected left to right, and re-mentioned words reuse their node.
#[derive(Clone, Debug, Default)]
pub struct SemanticGraph {
    nodes: IndexSet<WordId>,
    edges: IndexSet<(WordId, WordId)>,
}

impl SemanticGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one sentence: its words as nodes and an edge between each
    /// consecutive pair.
    pub fn extend(&mut self, sentence: &[WordId]) {
        for &w in sentence {
            self.nodes.insert(w);
        }
        for pair in sentence.windows(2) {
            self.edges.insert((pair[0], pair[1]));
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = WordId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn has_node(&self, w: WordId) -> bool {
        self.nodes.contains(&w)
    }

    pub fn has_edge(&self, u: WordId, v: WordId) -> bool {
        self.edges.contains(&(u, v))
    }

    pub fn edges(&self) -> impl Iterator<Item = (WordId, WordId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn out_neighbors(&self, u: WordId) -> impl Iterator<Item = WordId> + '_ {
        self.edges.iter().filter(move |(a, _)| *a == u).map(|(_, b)| *b)
    }
}

/// Adjacency used when propagating bank `i`: all story nodes in insertion
/// order, base edges plus the bank's shortcut edges. Entities absent from
/// the bank keep their place in the structure (paths may run through
/// them) even though they hold no state there.
pub fn prop_adjacency(
    memory: &Memory,
    graph: &SemanticGraph,
    bank_idx: usize,
) -> (Vec<WordId>, Vec<Vec<f64>>) {
    let order: Vec<WordId> = graph.nodes().collect();
    let index: IndexMap<WordId, usize> =
        order.iter().enumerate().map(|(i, &w)| (w, i)).collect();
    let n = order.len();
    let mut adj = vec![vec![0.0; n]; n];
    let mut put = |u: WordId, v: WordId| {
        if let (Some(&i), Some(&j)) = (index.get(&u), index.get(&v)) {
            adj[i][j] = 1.0;
        }
    };
    for (u, v) in graph.edges() {
        put(u, v);
    }
    for &(u, v) in &memory.banks[bank_idx].view_edges {
        put(u, v);
    }
    (order, adj)
}

/// Longest path (in edges) of a DAG adjacency; `None` when the graph has
/// a cycle, in which case path length is unbounded.
pub fn longest_path(adj: &[Vec<f64>]) -> Option<usize> {
    let n = adj.len();
    let mut indeg = vec![0usize; n];
    for row in adj {
        for (j, &x) in row.iter().enumerate() {
            if x != 0.0 {
                indeg[j] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&j| indeg[j] == 0).collect();
    let mut dist = vec![0usize; n];
    let mut seen = 0;
    while let Some(u) = queue.pop() {
        seen += 1;
        for (v, &x) in adj[u].iter().enumerate() {
            if x != 0.0 {
                dist[v] = dist[v].max(dist[u] + 1);
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push(v);
                }
            }
        }
    }
    if seen < n {
        None
    } else {
        Some(dist.into_iter().max().unwrap_or(0))
    }
}

/// Hop count for one propagation round: the graph's longest path capped
/// at `r_max` (cycles count as unbounded), and at least 1.
pub fn effective_r(adj: &[Vec<f64>], r_max: usize) -> usize {
    assert!(r_max >= 1, "effective_r: r_max must be >= 1");
    match longest_path(adj) {
        Some(l) => l.max(1).min(r_max),
        None => r_max,
    }
}

/// Walk-weighted ancestor sums: entry `j` of the result is
/// `sum_k sum_i walks_k(i -> j) * states[i]` for `k = 1..=r` (or `k = r`
/// alone when `cumulative` is false), where `walks_k` counts directed
/// walks of length `k` in `adjacency` with multiplicity. Nodes without a
/// state contribute nothing themselves but still carry walks through.
pub fn propagation_aggregate(
    tape: &mut Tape,
    adjacency: &[Vec<f64>],
    states: &[Option<Var>],
    hidden: usize,
    r: usize,
    cumulative: bool,
) -> Vec<Var> {
    let n = adjacency.len();
    assert!(r >= 1, "propagation: r must be >= 1, got {r}");
    assert_eq!(states.len(), n, "propagation: {} states for {n} nodes", states.len());
    assert!(
        adjacency.iter().all(|row| row.len() == n),
        "propagation: adjacency must be square"
    );
    if n == 0 {
        return Vec::new();
    }
    // Transposed adjacency: row j gathers walks that end at node j.
    let mut at = vec![0.0; n * n];
    for (i, row) in adjacency.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            at[j * n + i] = x;
        }
    }
    let at = Rc::new(at);
    let zero = tape.filled(Shape::Vector(hidden), 0.0);
    let parts: Vec<Var> = states.iter().map(|s| s.unwrap_or(zero)).collect();
    let stacked = tape.concat(&parts);
    let s = tape.reshape(stacked, Shape::Matrix(n, hidden));
    let mut power = tape.const_mul(at.clone(), n, n, s);
    let mut acc = power;
    for _ in 2..=r {
        power = tape.const_mul(at.clone(), n, n, power);
        acc = if cumulative { tape.add(acc, power) } else { power };
    }
    (0..n).map(|j| tape.row(acc, j)).collect()
}

/// Names of the bank-maintenance parameters in the store.
#[derive(Clone, Debug)]
pub struct MemoryParams {
    pub hidden: usize,
    au: GruParams,
    prop: GruParams,
}

/// Tape handles for the bank-maintenance weights.
pub struct MemoryVars {
    pub au: GruVars,
    pub prop: GruVars,
    pub new_w: Var,
    pub new_b: Var,
}

impl MemoryParams {
    /// Register the absorb GRU, the propagation GRU, and the bank-growth
    /// gate (a single fully connected row over mean state + entity count).
    pub fn init(store: &mut ParamStore, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = hidden;
        let au = GruParams::init(store, "mem.au", n, n, rng);
        let prop = GruParams::init(store, "mem.prop", n, n, rng);
        store.insert(
            "ctrl.new_w",
            Shape::Matrix(1, n + 1),
            xavier_normal(rng, n + 1, 1, n + 1),
        );
        store.insert("ctrl.new_b", Shape::Vector(1), vec![0.0]);
        MemoryParams { hidden, au, prop }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> MemoryVars {
        MemoryVars {
            au: self.au.bind(tape, store),
            prop: self.prop.bind(tape, store),
            new_w: tape.param(store, "ctrl.new_w"),
            new_b: tape.param(store, "ctrl.new_b"),
        }
    }
}

/// How discrete gate decisions are made.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecisionMode {
    /// Sample from the gate probability (training).
    Sample,
    /// Threshold the probability at 0.5 (inference).
    Threshold,
}

/// Source of gate decisions: the learned gates themselves, or a script
/// that forces them (used to pin down narrative fixtures in tests).
/// Scripted entries are indexed by sentence position; missing entries
/// mean "no new bank" and "move nothing".
#[derive(Clone, Debug)]
pub enum ControllerPolicy {
    Learned(DecisionMode),
    Scripted { new_bank: Vec<bool>, moves: Vec<Vec<WordId>> },
}

/// How an entity's move probability is computed: from the strength-gated
/// state (default), or from the strength alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoveScoring {
    GatedState,
    Strength,
}

/// Knobs for the per-sentence maintenance step.
#[derive(Clone, Debug)]
pub struct StepOptions {
    /// Propagation hop cap.
    pub r_max: usize,
    /// Sum walk contributions of every length `1..=r` (true) or of
    /// length exactly `r` (false).
    pub cumulative: bool,
    /// Multiplier on the aggregate feeding nodes mentioned by the newest
    /// sentence.
    pub recency_boost: f64,
    pub move_scoring: MoveScoring,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            r_max: 3,
            cumulative: true,
            recency_boost: 1.5,
            move_scoring: MoveScoring::GatedState,
        }
    }
}

/// What one sentence step produced: the growth-gate probability (always
/// on tape, for the growth loss), whether a bank was appended, and how
/// many entities were copied upward.
pub struct SentenceOutcome {
    pub p_new: Var,
    pub created_bank: bool,
    pub moved: usize,
}

/// One sentence entity arriving at bank 0: its freshly encoded state and
/// its freshly scored strength.
pub struct Arrival {
    pub word: WordId,
    pub state: Var,
    pub strength: Var,
}

/// Resolve a gate probability to a 0/1 decision through the
/// straight-through Bernoulli (the probability itself stays on tape).
pub fn controller(tape: &mut Tape, p: Var, mode: DecisionMode, rng: &mut ChaCha8Rng) -> bool {
    let st = match mode {
        DecisionMode::Sample => StMode::Sample,
        DecisionMode::Threshold => StMode::Threshold,
    };
    let d = tape.bernoulli_st(p, st, rng);
    tape.value_scalar(d) > 0.5
}

/// Absorb a sentence into bank `bank_idx`: new word ids are inserted into
/// bank 0 (re-mentions refresh the stored strength), then every entity in
/// the bank integrates the sentence summary through the absorb GRU.
pub fn pi_au(
    tape: &mut Tape,
    au: &GruVars,
    memory: &mut Memory,
    bank_idx: usize,
    arrivals: &[Arrival],
    w_n: Var,
) {
    if bank_idx == 0 {
        let bank = &mut memory.banks[0];
        for a in arrivals {
            match bank.entities.get_mut(&a.word) {
                Some(e) => e.strength = a.strength,
                None => {
                    bank.entities.insert(
                        a.word,
                        Entity { word: a.word, state: a.state, strength: a.strength },
                    );
                }
            }
        }
    }
    let pairs: Vec<(WordId, Var)> =
        memory.banks[bank_idx].entities.values().map(|e| (e.word, e.state)).collect();
    for (w, state) in pairs {
        let next = gru_step(tape, au, w_n, state);
        memory.banks[bank_idx].entities.get_mut(&w).unwrap().state = next;
    }
}

/// Propagate states along the graph within bank `bank_idx`: each member
/// receives the walk-weighted sum of its ancestors' states (members only
/// — absent entities contribute structure but hold no state here), with
/// the newest sentence's nodes boosted, then integrates it through the
/// propagation GRU. Entities absent from the bank receive no update.
pub fn pi_prop(
    tape: &mut Tape,
    prop: &GruVars,
    memory: &mut Memory,
    graph: &SemanticGraph,
    bank_idx: usize,
    recent: &[WordId],
    opts: &StepOptions,
) {
    if memory.banks[bank_idx].is_empty() || graph.node_count() == 0 {
        return;
    }
    let (order, adj) = prop_adjacency(memory, graph, bank_idx);
    let r = effective_r(&adj, opts.r_max);
    let bank = &memory.banks[bank_idx];
    let states: Vec<Option<Var>> =
        order.iter().map(|w| bank.entities.get(w).map(|e| e.state)).collect();
    let hidden = bank
        .entities
        .values()
        .next()
        .map(|e| tape.shape(e.state).len())
        .expect("bank checked nonempty");
    let agg = propagation_aggregate(tape, &adj, &states, hidden, r, opts.cumulative);
    let recent_set: IndexSet<WordId> = recent.iter().copied().collect();
    for (j, &w) in order.iter().enumerate() {
        let Some(e) = memory.banks[bank_idx].entities.get(&w) else { continue };
        let state = e.state;
        let mut a = agg[j];
        if recent_set.contains(&w) {
            a = tape.scale_const(a, opts.recency_boost);
        }
        let next = gru_step(tape, prop, a, state);
        memory.banks[bank_idx].entities.get_mut(&w).unwrap().state = next;
    }
}

/// Copy question-relevant entities from bank `from` into bank `from + 1`
/// (the source keeps its copy; ids already present above are skipped),
/// then rebuild the destination's shortcut edges. Returns the number of
/// entities copied. Panics when `from` is the last bank — callers guard.
pub fn pi_move(
    tape: &mut Tape,
    memory: &mut Memory,
    graph: &SemanticGraph,
    from: usize,
    t: usize,
    policy: &ControllerPolicy,
    opts: &StepOptions,
    rng: &mut ChaCha8Rng,
) -> usize {
    assert!(
        from + 1 < memory.banks.len(),
        "pi_move: bank {from} is the last bank; nowhere to move to"
    );
    let words: Vec<WordId> = memory.banks[from].words().collect();
    let mut moved = 0;
    for w in words {
        let (state, strength) = {
            let e = &memory.banks[from].entities[&w];
            (e.state, e.strength)
        };
        let p = match opts.move_scoring {
            MoveScoring::GatedState => {
                let gated = tape.hadamard(strength, state);
                let m = tape.mean(gated);
                tape.sigmoid(m)
            }
            MoveScoring::Strength => tape.mean(strength),
        };
        let decide = match policy {
            ControllerPolicy::Learned(mode) => controller(tape, p, *mode, rng),
            ControllerPolicy::Scripted { moves, .. } => {
                moves.get(t).is_some_and(|set| set.contains(&w))
            }
        };
        if decide && !memory.banks[from + 1].contains(w) {
            memory.banks[from + 1].entities.insert(w, Entity { word: w, state, strength });
            moved += 1;
        }
    }
    memory.refresh_view(graph, from + 1);
    moved
}

/// Growth-gate probability for the last bank: sigmoid of a fully
/// connected row over the bank's mean entity state concatenated with its
/// normalized entity count. Returned on tape whether or not the gate
/// fires.
pub fn pi_new(tape: &mut Tape, vars: &MemoryVars, memory: &Memory, hidden: usize) -> Var {
    let bank = memory.last();
    let mean_state = if bank.is_empty() {
        tape.filled(Shape::Vector(hidden), 0.0)
    } else {
        let mut acc = None;
        for e in bank.entities.values() {
            acc = Some(match acc {
                None => e.state,
                Some(a) => tape.add(a, e.state),
            });
        }
        tape.scale_const(acc.unwrap(), 1.0 / bank.len() as f64)
    };
    let count = tape.leaf(Shape::Vector(1), vec![bank.len() as f64 / 32.0]);
    let input = tape.concat(&[mean_state, count]);
    let z = tape.matmul(vars.new_w, input);
    let z = tape.add(z, vars.new_b);
    tape.sigmoid(z)
}

#[allow(clippy::too_many_arguments)]
fn bank_body(
    tape: &mut Tape,
    mem_vars: &MemoryVars,
    sgru_vars: &SgruVars,
    memory: &mut Memory,
    graph: &SemanticGraph,
    i: usize,
    arrivals: &[Arrival],
    sentence: &[WordId],
    w_n: Var,
    q: Var,
    t: usize,
    policy: &ControllerPolicy,
    opts: &StepOptions,
    rng: &mut ChaCha8Rng,
) -> usize {
    pi_au(tape, &mem_vars.au, memory, i, arrivals, w_n);
    pi_prop(tape, &mem_vars.prop, memory, graph, i, sentence, opts);
    let mut moved = 0;
    if i + 1 < memory.banks.len() {
        moved = pi_move(tape, memory, graph, i, t, policy, opts, rng);
    }
    // Re-score this bank's strengths against the question.
    let pairs: Vec<(WordId, Var, Var)> = memory.banks[i]
        .entities
        .values()
        .map(|e| (e.word, e.state, e.strength))
        .collect();
    for (w, state, strength) in pairs {
        let next = sgru_step(tape, sgru_vars, state, strength, q);
        memory.banks[i].entities.get_mut(&w).unwrap().strength = next;
    }
    moved
}

/// Hard ceiling on banks per story, as a resource guard only: trained
/// gates create a handful of banks, but an untrained one can spawn a
/// bank almost every sentence, and each bank costs a full maintenance
/// pass per sentence for the rest of the story.
pub const MAX_BANKS: usize = 16;

/// Process one sentence (position `t`, 0-based) through the full
/// maintenance step: extend the graph, score the sentence's entities,
/// run the bank body over every bank, and evaluate the growth gate on
/// the last bank. When the gate fires, an empty bank is appended and the
/// previously-last bank's body runs once more so its move gate can
/// populate the new bank this very sentence; the gate is not re-evaluated.
#[allow(clippy::too_many_arguments)]
pub fn step_sentence(
    tape: &mut Tape,
    mem_vars: &MemoryVars,
    sgru_vars: &SgruVars,
    memory: &mut Memory,
    graph: &mut SemanticGraph,
    sentence: &[WordId],
    fresh: &IndexMap<WordId, Var>,
    w_n: Var,
    q: Var,
    t: usize,
    policy: &ControllerPolicy,
    opts: &StepOptions,
    rng: &mut ChaCha8Rng,
) -> SentenceOutcome {
    assert!(!sentence.is_empty(), "step_sentence: empty sentence");
    graph.extend(sentence);
    let hidden = tape.shape(q).len();

    let mut arrivals = Vec::new();
    let mut seen = IndexSet::new();
    for &w in sentence {
        if !seen.insert(w) {
            continue;
        }
        let state = *fresh
            .get(&w)
            .unwrap_or_else(|| panic!("step_sentence: no encoded state for word {w}"));
        let s_prev = match memory.banks[0].entities.get(&w) {
            Some(e) => e.strength,
            None => initial_strength(tape, hidden, rng),
        };
        let strength = sgru_step(tape, sgru_vars, state, s_prev, q);
        arrivals.push(Arrival { word: w, state, strength });
    }

    let bank_count = memory.banks.len();
    let mut p_new = None;
    let mut created_bank = false;
    let mut moved = 0;
    for i in 0..bank_count {
        moved += bank_body(
            tape, mem_vars, sgru_vars, memory, graph, i, &arrivals, sentence, w_n, q, t,
            policy, opts, rng,
        );
        if i + 1 == bank_count {
            let p = pi_new(tape, mem_vars, memory, hidden);
            let fire = match policy {
                ControllerPolicy::Learned(mode) => controller(tape, p, *mode, rng),
                ControllerPolicy::Scripted { new_bank, .. } => {
                    new_bank.get(t).copied().unwrap_or(false)
                }
            };
            // Resource guard: an untrained gate fires on about half of
            // all sentences in sample mode, and on long stories that
            // many banks exhausts memory. The draw above still happens
            // (stream stability); only the append is capped.
            if fire && bank_count < MAX_BANKS {
                memory.banks.push(MemoryBank::new());
                created_bank = true;
                moved += bank_body(
                    tape, mem_vars, sgru_vars, memory, graph, i, &arrivals, sentence, w_n,
                    q, t, policy, opts, rng,
                );
            }
            p_new = Some(p);
        }
    }
    SentenceOutcome {
        p_new: p_new.expect("loop always reaches the last bank"),
        created_bank,
        moved,
    }
}
