//! Attention readout over the bank hierarchy, producing answer logits.
//!
//! Banks are consulted tail-first (the newest bank carries the most
//! distilled entities); each consulted bank contributes an attention
//! readout of its strength-weighted entity states, weighted exponentially
//! by the bank's normalized rank so later banks dominate. Training reads
//! every bank so gradients reach all of them; inference may restrict the
//! readout to the last few banks.

use crate::autodiff::{ParamStore, Shape, Tape, Var};
use crate::gru::xavier_normal;
use crate::memory::{Memory, MemoryBank};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// How many tail banks a decode consults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankSpan {
    All,
    Last(usize),
}

impl BankSpan {
    /// Number of tail banks actually consulted out of `count`.
    pub fn resolve(self, count: usize) -> usize {
        match self {
            BankSpan::All => count,
            BankSpan::Last(k) => {
                assert!(k >= 1, "bank span must consult at least one bank");
                k.min(count)
            }
        }
    }
}

/// Names and fixed knobs of the readout head.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub hidden: usize,
    pub vocab_size: usize,
    /// Exponent scale on the normalized bank rank; the last bank is
    /// weighted `e^alpha`.
    pub alpha: f64,
}

/// Tape handles for the readout head.
pub struct DecoderVars {
    pub h: Var,
    pub r: Var,
    pub slope: Var,
    pub alpha: f64,
}

impl DecoderParams {
    pub fn init(
        store: &mut ParamStore,
        vocab_size: usize,
        hidden: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = hidden;
        store.insert("dec.h", Shape::Matrix(n, n), xavier_normal(rng, n, n, n * n));
        store.insert(
            "dec.r",
            Shape::Matrix(vocab_size, n),
            xavier_normal(rng, n, vocab_size, vocab_size * n),
        );
        store.insert("dec.slope", Shape::Vector(1), vec![0.25]);
        DecoderParams { hidden, vocab_size, alpha }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> DecoderVars {
        DecoderVars {
            h: tape.param(store, "dec.h"),
            r: tape.param(store, "dec.r"),
            slope: tape.param(store, "dec.slope"),
            alpha: self.alpha,
        }
    }
}

/// One bank's contribution: attention over its strength-weighted entity
/// states against the question, scaled by `weight`. `None` for an empty
/// bank.
pub fn bank_readout(tape: &mut Tape, bank: &MemoryBank, q: Var, weight: f64) -> Option<Var> {
    if bank.is_empty() {
        return None;
    }
    let n = tape.shape(q).len();
    let k = bank.len();
    let rows: Vec<Var> = bank
        .entities
        .values()
        .map(|e| {
            let ms = tape.mean(e.strength);
            tape.scale(e.state, ms)
        })
        .collect();
    let stacked = tape.concat(&rows);
    let c = tape.reshape(stacked, Shape::Matrix(k, n));
    let scores = tape.matmul(c, q);
    let ps = tape.softmax(scores);
    let ct = tape.transpose(c);
    let attended = tape.matmul(ct, ps);
    Some(tape.scale_const(attended, weight))
}

/// Read the last `span` banks (newest first, empty banks skipped) and map
/// the pooled readout through the answer head. Bank `i`'s readout is
/// weighted `exp(alpha * rank)` with rank `(i+1)/bank_count`, so the
/// newest bank always carries weight `e^alpha`. Errors when every
/// consulted bank is empty.
pub fn decode(
    tape: &mut Tape,
    dec: &DecoderVars,
    memory: &Memory,
    q: Var,
    span: BankSpan,
) -> Result<Var> {
    let count = memory.banks.len();
    let consult = span.resolve(count);
    let mut g: Option<Var> = None;
    for i in (count - consult..count).rev() {
        let rank = (i + 1) as f64 / count as f64;
        let weight = (dec.alpha * rank).exp();
        if let Some(part) = bank_readout(tape, &memory.banks[i], q, weight) {
            g = Some(match g {
                None => part,
                Some(acc) => tape.add(acc, part),
            });
        }
    }
    let g = g.ok_or(Error::EmptyDecode(consult))?;
    let hg = tape.matmul(dec.h, g);
    let pre = tape.add(hg, q);
    let act = tape.prelu(pre, dec.slope);
    Ok(tape.matmul(dec.r, act))
}

/// How many entities a decode over `span` touches, and that count as a
/// fraction of the vocabulary (duplicates across banks may push it past
/// 1).
pub fn entities_examined(memory: &Memory, span: BankSpan, vocab_size: usize) -> (usize, f64) {
    let count = memory.banks.len();
    let consult = span.resolve(count);
    let touched: usize =
        memory.banks[count - consult..].iter().map(|b| b.len()).sum();
    (touched, touched as f64 / vocab_size as f64)
}
