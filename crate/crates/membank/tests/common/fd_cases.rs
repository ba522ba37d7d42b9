//! Finite-difference gradient cases shared by the gradient suite and the
//! acceptance checks: every differentiable tape operation plus the
//! composed strength-gate, growth-gate and readout graphs. Each case
//! rebuilds its graph from flat leaf values so the central-difference
//! oracle in [`super`] can probe it, and compares the reverse-mode
//! gradient of every leaf against that oracle.
//!
//! The discrete gate node is deliberately absent: its output is a
//! detached 0/1 draw whose pass-through contract is asserted separately,
//! not a derivative a difference quotient could approximate.

use membank::autodiff::{Shape, Tape, Var};
use membank::decoder::{decode, BankSpan, DecoderVars};
use membank::encoder::{sgru_step, SgruVars};
use membank::gru::{gru_step, GruVars};
use membank::memory::{Entity, Memory, MemoryBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;
use std::rc::Rc;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn draw(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Like [`draw`], but redraw any element within `margin` of a kink point
/// so the two-sided difference quotient stays on one linear piece.
fn draw_off_kinks(
    rng: &mut ChaCha8Rng,
    n: usize,
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect()
}

/// Check one case across `seeds`: draw leaf values, compare the backward
/// gradient of every leaf (absent gradients read as zero) against the
/// central-difference oracle over the concatenated inputs.
fn check(
    name: &str,
    seeds: Range<u64>,
    shapes: &[Shape],
    sample: impl Fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    let sizes: Vec<usize> = shapes.iter().map(|s| s.len()).collect();
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..shapes.len()).flat_map(|i| sample(&mut rng, i)).collect();

        let rebuild = |x: &[f64], tape: &mut Tape| -> (Vec<Var>, Var) {
            let mut vars = Vec::with_capacity(shapes.len());
            let mut off = 0;
            for (&sh, &sz) in shapes.iter().zip(&sizes) {
                vars.push(tape.leaf(sh, x[off..off + sz].to_vec()));
                off += sz;
            }
            let loss = build(tape, &vars);
            (vars, loss)
        };

        let mut tape = Tape::new();
        let (vars, loss) = rebuild(&flat, &mut tape);
        tape.backward(loss);
        let mut analytic = Vec::with_capacity(flat.len());
        for (&v, &sz) in vars.iter().zip(&sizes) {
            match tape.grad(v) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat(0.0).take(sz)),
            }
        }

        let numeric = super::finite_difference(
            |x| {
                let mut t = Tape::new();
                let (_, l) = rebuild(x, &mut t);
                t.value_scalar(l)
            },
            &flat,
            EPS,
        );
        let err = super::max_rel_err(&analytic, &numeric);
        assert!(err < TOL, "{name}: seed {seed} gradient error {err:.3e} (tolerance {TOL:.0e})");
    }
}

const V5: Shape = Shape::Vector(5);

/// Run every case over the given seed range. Panics on the first failing
/// comparison, naming the case and seed.
pub fn run_all(seeds: Range<u64>) {
    check("add", seeds.clone(), &[V5, V5, V5], |r, _| draw(r, 5, -2.0, 2.0), |t, v| {
        let s = t.add(v[0], v[1]);
        t.dot(s, v[2])
    });
    check("sub", seeds.clone(), &[V5, V5, V5], |r, _| draw(r, 5, -2.0, 2.0), |t, v| {
        let s = t.sub(v[0], v[1]);
        t.dot(s, v[2])
    });
    check("hadamard", seeds.clone(), &[V5, V5, V5], |r, _| draw(r, 5, -2.0, 2.0), |t, v| {
        let s = t.hadamard(v[0], v[1]);
        t.dot(s, v[2])
    });
    check("dot", seeds.clone(), &[V5, V5], |r, _| draw(r, 5, -2.0, 2.0), |t, v| {
        t.dot(v[0], v[1])
    });
    check(
        "matmul_vec",
        seeds.clone(),
        &[Shape::Matrix(3, 4), Shape::Vector(4), Shape::Vector(3)],
        |r, i| draw(r, [12, 4, 3][i], -1.5, 1.5),
        |t, v| {
            let y = t.matmul(v[0], v[1]);
            t.dot(y, v[2])
        },
    );
    check(
        "matmul_mat",
        seeds.clone(),
        &[Shape::Matrix(3, 4), Shape::Matrix(4, 2), Shape::Vector(2), Shape::Vector(3)],
        |r, i| draw(r, [12, 8, 2, 3][i], -1.5, 1.5),
        |t, v| {
            let m = t.matmul(v[0], v[1]);
            let y = t.matmul(m, v[2]);
            t.dot(y, v[3])
        },
    );
    // The constant factor is drawn fresh per graph build but is not a
    // leaf: gradient flows only into the right-hand value.
    check(
        "const_mul",
        seeds.clone(),
        &[Shape::Vector(4), Shape::Vector(3)],
        |r, i| draw(r, [4, 3][i], -1.5, 1.5),
        |t, v| {
            let m = Rc::new(vec![0.7, -0.3, 0.2, 1.1, -0.6, 0.4, 0.9, -1.2, 0.1, 0.5, -0.8, 0.3]);
            let y = t.const_mul(m, 3, 4, v[0]);
            t.dot(y, v[1])
        },
    );
    check(
        "transpose",
        seeds.clone(),
        &[Shape::Matrix(3, 4), Shape::Vector(3), Shape::Vector(4)],
        |r, i| draw(r, [12, 3, 4][i], -1.5, 1.5),
        |t, v| {
            let at = t.transpose(v[0]);
            let y = t.matmul(at, v[1]);
            t.dot(y, v[2])
        },
    );
    for (name, f) in [
        ("sigmoid", Tape::sigmoid as fn(&mut Tape, Var) -> Var),
        ("tanh", Tape::tanh),
        ("exp", Tape::exp),
        ("one_minus", Tape::one_minus),
        ("softmax", Tape::softmax),
    ] {
        check(name, seeds.clone(), &[V5, V5], |r, _| draw(r, 5, -2.0, 2.0), move |t, v| {
            let y = f(t, v[0]);
            t.dot(y, v[1])
        });
    }
    check(
        "log",
        seeds.clone(),
        &[V5, V5],
        |r, i| if i == 0 { draw(r, 5, 0.2, 3.0) } else { draw(r, 5, -2.0, 2.0) },
        |t, v| {
            let y = t.log(v[0]);
            t.dot(y, v[1])
        },
    );
    check(
        "clamp",
        seeds.clone(),
        &[V5, V5],
        |r, i| {
            if i == 0 {
                draw_off_kinks(r, 5, -2.0, 2.0, &[-0.8, 0.9], 0.05)
            } else {
                draw(r, 5, -2.0, 2.0)
            }
        },
        |t, v| {
            let y = t.clamp(v[0], -0.8, 0.9);
            t.dot(y, v[1])
        },
    );
    check(
        "prelu",
        seeds.clone(),
        &[V5, Shape::Vector(1), V5],
        |r, i| match i {
            0 => draw_off_kinks(r, 5, -2.0, 2.0, &[0.0], 0.05),
            1 => draw(r, 1, 0.05, 0.8),
            _ => draw(r, 5, -2.0, 2.0),
        },
        |t, v| {
            let y = t.prelu(v[0], v[1]);
            t.dot(y, v[2])
        },
    );
    check(
        "concat",
        seeds.clone(),
        &[Shape::Vector(3), Shape::Vector(4), Shape::Vector(2), Shape::Vector(9)],
        |r, i| draw(r, [3, 4, 2, 9][i], -2.0, 2.0),
        |t, v| {
            let y = t.concat(&v[0..3]);
            t.dot(y, v[3])
        },
    );
    check("sum", seeds.clone(), &[V5, V5], |r, _| draw(r, 5, -2.0, 2.0), |t, v| {
        let h = t.hadamard(v[0], v[1]);
        t.sum(h)
    });
    check("mean", seeds.clone(), &[V5, V5], |r, _| draw(r, 5, -2.0, 2.0), |t, v| {
        let h = t.hadamard(v[0], v[1]);
        t.mean(h)
    });
    check(
        "scale",
        seeds.clone(),
        &[V5, Shape::Vector(1), V5],
        |r, i| draw(r, [5, 1, 5][i], -2.0, 2.0),
        |t, v| {
            let y = t.scale(v[0], v[1]);
            t.dot(y, v[2])
        },
    );
    check("scale_const", seeds.clone(), &[V5, V5], |r, _| draw(r, 5, -2.0, 2.0), |t, v| {
        let y = t.scale_const(v[0], 0.73);
        t.dot(y, v[1])
    });
    check(
        "row",
        seeds.clone(),
        &[Shape::Matrix(4, 3), Shape::Vector(3)],
        |r, i| draw(r, [12, 3][i], -2.0, 2.0),
        |t, v| {
            let y = t.row(v[0], 2);
            t.dot(y, v[1])
        },
    );
    check(
        "reshape",
        seeds.clone(),
        &[Shape::Vector(6), Shape::Vector(3), Shape::Vector(2)],
        |r, i| draw(r, [6, 3, 2][i], -2.0, 2.0),
        |t, v| {
            let m = t.reshape(v[0], Shape::Matrix(2, 3));
            let y = t.matmul(m, v[1]);
            t.dot(y, v[2])
        },
    );

    // Composed graphs: one full GRU step, one strength-gate step, the
    // growth gate, and a two-bank decode, differentiated end to end
    // through every weight.
    let m3 = Shape::Matrix(3, 3);
    let v3 = Shape::Vector(3);
    check(
        "gru_step",
        seeds.clone(),
        &[m3, m3, v3, m3, m3, v3, m3, m3, v3, v3, v3, v3],
        |r, i| draw(r, if i % 3 == 2 || i > 8 { 3 } else { 9 }, -0.9, 0.9),
        |t, v| {
            let g = GruVars {
                wz: v[0],
                uz: v[1],
                bz: v[2],
                wr: v[3],
                ur: v[4],
                br: v[5],
                wh: v[6],
                uh: v[7],
                bh: v[8],
            };
            let h = gru_step(t, &g, v[9], v[10]);
            t.dot(h, v[11])
        },
    );
    check(
        "strength_gate_step",
        seeds.clone(),
        &[m3, m3, m3, Shape::Matrix(3, 1), m3, m3, v3, v3, v3, v3],
        |r, i| match i {
            3 => draw(r, 3, -0.9, 0.9),
            7 => draw(r, 3, 0.05, 0.95),
            i if i < 6 => draw(r, 9, -0.9, 0.9),
            _ => draw(r, 3, -0.9, 0.9),
        },
        |t, v| {
            let sg = SgruVars { uz: v[0], wz: v[1], xz: v[2], ur: v[3], wh: v[4], uh: v[5] };
            let s = sgru_step(t, &sg, v[6], v[7], v[8]);
            t.dot(s, v[9])
        },
    );
    check(
        "growth_gate",
        seeds.clone(),
        &[v3, v3, v3, Shape::Matrix(1, 4), Shape::Vector(1)],
        |r, i| draw(r, [3, 3, 3, 4, 1][i], -0.9, 0.9),
        |t, v| {
            let mut acc = t.add(v[0], v[1]);
            acc = t.add(acc, v[2]);
            let mean_state = t.scale_const(acc, 1.0 / 3.0);
            let count = t.leaf(Shape::Vector(1), vec![3.0 / 32.0]);
            let input = t.concat(&[mean_state, count]);
            let z = t.matmul(v[3], input);
            let z = t.add(z, v[4]);
            let p = t.sigmoid(z);
            t.sum(p)
        },
    );
    // Decode over two banks (one shared word) through the real readout:
    // attention inside each bank, rank weighting, PReLU head.
    check(
        "decode",
        seeds.clone(),
        &[
            v3, v3, v3, v3, // entity states
            v3, v3, v3, v3, // entity strengths
            v3, // question
            Shape::Matrix(3, 3),
            Shape::Matrix(5, 3),
            Shape::Vector(1),
            Shape::Vector(5), // readout probe
        ],
        |r, i| match i {
            4..=7 => draw(r, 3, 0.05, 0.95),
            9 => draw(r, 9, -0.9, 0.9),
            10 => draw(r, 15, -0.9, 0.9),
            11 => draw(r, 1, 0.05, 0.8),
            12 => draw(r, 5, -1.0, 1.0),
            _ => draw(r, 3, -0.9, 0.9),
        },
        |t, v| {
            let mut memory = Memory::new();
            let mut bank1 = MemoryBank::new();
            for w in 0..3 {
                memory.banks[0]
                    .entities
                    .insert(w, Entity { word: w, state: v[w], strength: v[w + 4] });
            }
            for w in [1usize, 3] {
                bank1.entities.insert(w, Entity { word: w, state: v[w], strength: v[w + 4] });
            }
            memory.banks.push(bank1);
            let dec = DecoderVars { h: v[9], r: v[10], slope: v[11], alpha: 0.8 };
            let logits = decode(t, &dec, &memory, v[8], BankSpan::All).unwrap();
            t.dot(logits, v[12])
        },
    );
}
