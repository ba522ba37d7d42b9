//! Shared test oracles.
//!
//! Everything in here is deliberately independent of the library's
//! implementation paths: gradients come from central finite differences,
//! graph propagation from literal walk enumeration, and reachability from
//! breadth-first search. Tests compare library output against these.

#![allow(dead_code)]

// Shared gradient-check case list and the scripted-gate scenario; unlike
// the oracles above these drive the library directly, so they live in
// their own files.
pub mod fd_cases;
pub mod scenario;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Relative error with an absolute floor, so values near zero are compared
/// absolutely instead of blowing up the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Sum of ancestor states over all directed walks ending at each node,
/// counting walk multiplicity, by literal enumeration.
///
/// `adj[u][v]` marks an edge u -> v. For every walk u -> ... -> v whose
/// length (edge count) is in `lengths`, `state[u]` is added to the result
/// row for v. This mirrors what powers of the adjacency matrix compute,
/// without using matrix powers.
pub fn walk_sums(adj: &[Vec<bool>], states: &[Vec<f64>], lengths: &[usize]) -> Vec<Vec<f64>> {
    let n = adj.len();
    let dim = if states.is_empty() { 0 } else { states[0].len() };
    let mut out = vec![vec![0.0; dim]; n];
    for &len in lengths {
        if len == 0 {
            continue;
        }
        for start in 0..n {
            // Enumerate every walk of exactly `len` edges from `start`.
            let mut stack = vec![(start, 0usize)];
            walk_rec(adj, start, 0, len, &mut stack, &mut |end| {
                for (o, s) in out[end].iter_mut().zip(&states[start]) {
                    *o += s;
                }
            });
        }
    }
    out
}

fn walk_rec(
    adj: &[Vec<bool>],
    node: usize,
    depth: usize,
    target: usize,
    stack: &mut Vec<(usize, usize)>,
    emit: &mut impl FnMut(usize),
) {
    if depth == target {
        emit(node);
        return;
    }
    for (next, &has) in adj[node].iter().enumerate() {
        if has {
            stack.push((next, depth + 1));
            walk_rec(adj, next, depth + 1, target, stack, emit);
            stack.pop();
        }
    }
}

/// Breadth-first directed reachability (u -> v through one or more edges,
/// or u == v).
pub fn reachable(adj: &[Vec<bool>], from: usize, to: usize) -> bool {
    if from == to {
        return true;
    }
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([from]);
    seen[from] = true;
    while let Some(u) = queue.pop_front() {
        for (v, &has) in adj[u].iter().enumerate() {
            if has && !seen[v] {
                if v == to {
                    return true;
                }
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    false
}

/// Scalar-arithmetic reference for one GRU step, written out element by
/// element. Weight matrices are row-major `hid x in_dim` (for w*) and
/// `hid x hid` (for u*); update rule is
///   z = sigmoid(Wz x + Uz h + bz)
///   r = sigmoid(Wr x + Ur h + br)
///   c = tanh(Wh x + Uh (r .* h) + bh)
///   h' = z .* h + (1 - z) .* c
pub struct GruRef<'a> {
    pub wz: &'a [f64],
    pub uz: &'a [f64],
    pub bz: &'a [f64],
    pub wr: &'a [f64],
    pub ur: &'a [f64],
    pub br: &'a [f64],
    pub wh: &'a [f64],
    pub uh: &'a [f64],
    pub bh: &'a [f64],
}

pub fn gru_ref_step(p: &GruRef, x: &[f64], h: &[f64]) -> Vec<f64> {
    let hid = h.len();
    let ind = x.len();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut out = vec![0.0; hid];
    for i in 0..hid {
        let mut zi = p.bz[i];
        for j in 0..ind {
            zi += p.wz[i * ind + j] * x[j];
        }
        for j in 0..hid {
            zi += p.uz[i * hid + j] * h[j];
        }
        let z = sig(zi);
        // r gates the previous hidden state inside the candidate.
        let mut ci = p.bh[i];
        for j in 0..ind {
            ci += p.wh[i * ind + j] * x[j];
        }
        for j in 0..hid {
            // candidate sees r_j * h_j; r_j depends on row j, recompute it.
            let mut rj = p.br[j];
            for k in 0..ind {
                rj += p.wr[j * ind + k] * x[k];
            }
            for k in 0..hid {
                rj += p.ur[j * hid + k] * h[k];
            }
            ci += p.uh[i * hid + j] * (sig(rj) * h[j]);
        }
        let c = ci.tanh();
        out[i] = z * h[i] + (1.0 - z) * c;
    }
    out
}

/// Bernoulli KL divergence computed directly from the definition.
pub fn bernoulli_kl_ref(p: f64, q: f64) -> f64 {
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}
