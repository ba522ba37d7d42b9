//! Shared GRU cell and weight-initialization helpers.
//!
//! Several places run the same gated update with their own weights: the
//! sentence and question encoders, the per-sentence entity update, and the
//! graph-propagation update. Each owns a [`GruParams`] naming its slice of
//! the parameter store; [`gru_step`] records one update on the tape.

use crate::autodiff::{ParamStore, Shape, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Names of one GRU cell's parameters in the store.
#[derive(Clone, Debug)]
pub struct GruParams {
    prefix: String,
}

/// Tape handles for one cell's weights, bound once per story.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

impl GruParams {
    /// Register freshly initialized weights under `prefix` and return the
    /// naming handle. Gate matrices are Xavier-normal, biases zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hid: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        for gate in ["z", "r", "h"] {
            store.insert(
                &format!("{prefix}.w{gate}"),
                Shape::Matrix(hid, in_dim),
                xavier_normal(rng, in_dim, hid, hid * in_dim),
            );
            store.insert(
                &format!("{prefix}.u{gate}"),
                Shape::Matrix(hid, hid),
                xavier_normal(rng, hid, hid, hid * hid),
            );
            store.insert(&format!("{prefix}.b{gate}"), Shape::Vector(hid), vec![0.0; hid]);
        }
        GruParams { prefix: prefix.to_string() }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> GruVars {
        let mut get = |suffix: &str| tape.param(store, &format!("{}.{suffix}", self.prefix));
        GruVars {
            wz: get("wz"),
            uz: get("uz"),
            bz: get("bz"),
            wr: get("wr"),
            ur: get("ur"),
            br: get("br"),
            wh: get("wh"),
            uh: get("uh"),
            bh: get("bh"),
        }
    }
}

/// One GRU step:
///   z = sigmoid(Wz x + Uz h + bz)
///   r = sigmoid(Wr x + Ur h + br)
///   c = tanh(Wh x + Uh (r .* h) + bh)
///   h' = z .* h + (1 - z) .* c
pub fn gru_step(tape: &mut Tape, g: &GruVars, x: Var, h: Var) -> Var {
    let z = {
        let a = tape.matmul(g.wz, x);
        let b = tape.matmul(g.uz, h);
        let s = tape.add(a, b);
        let s = tape.add(s, g.bz);
        tape.sigmoid(s)
    };
    let r = {
        let a = tape.matmul(g.wr, x);
        let b = tape.matmul(g.ur, h);
        let s = tape.add(a, b);
        let s = tape.add(s, g.br);
        tape.sigmoid(s)
    };
    let c = {
        let gated = tape.hadamard(r, h);
        let a = tape.matmul(g.wh, x);
        let b = tape.matmul(g.uh, gated);
        let s = tape.add(a, b);
        let s = tape.add(s, g.bh);
        tape.tanh(s)
    };
    let keep = tape.hadamard(z, h);
    let one_minus_z = tape.one_minus(z);
    let fresh = tape.hadamard(one_minus_z, c);
    tape.add(keep, fresh)
}

/// Xavier-normal draws: N(0, 2 / (fan_in + fan_out)).
pub fn xavier_normal(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Uniform draws from [-bound, bound].
pub fn uniform_pm(rng: &mut ChaCha8Rng, bound: f64, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Normal draws with the given mean and variance, clamped to [0, 1].
pub fn clamped_normal(rng: &mut ChaCha8Rng, mean: f64, var: f64, len: usize) -> Vec<f64> {
    let dist = Normal::new(mean, var.sqrt()).expect("valid normal");
    (0..len).map(|_| dist.sample(rng).clamp(0.0, 1.0)).collect()
}
