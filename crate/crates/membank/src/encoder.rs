//! Word embedding, sentence/question encoding, and question-relevance
//! strengths.
//!
//! Sentences run through an accumulation GRU whose per-step outputs are
//! summed into a per-word lookup `D`; the hidden state carries across
//! sentences within a story and the final state of each sentence (`w_N`)
//! doubles as the sentence summary. Questions run through a separate GRU
//! with no accumulation. The strength GRU (SGRU) turns an entity state, its
//! previous strength and the question state into a fresh strength vector in
//! `[0,1]^n`; its reset gate is driven by the dissimilarity between the
//! previous strength and the question.

use crate::autodiff::{ParamStore, Shape, Tape, Var};
use crate::gru::{gru_step, xavier_normal, GruParams, GruVars};
use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

/// Word id. Id 0 is reserved for padding/unknown and never produced by
/// tokenization.
pub type WordId = usize;

/// Dense word <-> id map. Ids are assigned in first-encounter order
/// starting at 1; id 0 is reserved.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    ids: IndexMap<String, WordId>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total id count including the reserved id 0.
    pub fn len(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Id for `word`, interning it if new.
    pub fn intern(&mut self, word: &str) -> WordId {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.ids.len() + 1;
        self.ids.insert(word.to_string(), id);
        id
    }

    pub fn id_of(&self, word: &str) -> Option<WordId> {
        self.ids.get(word).copied()
    }

    /// Word for `id`; the reserved id renders as `<unk>`.
    pub fn word_of(&self, id: WordId) -> &str {
        if id == 0 {
            return "<unk>";
        }
        self.ids
            .get_index(id - 1)
            .map(|(w, _)| w.as_str())
            .unwrap_or_else(|| panic!("vocabulary: id {id} out of range (|V|={})", self.len()))
    }

    /// Words in id order (excluding the reserved id).
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(|s| s.as_str())
    }
}

/// Names of all encoder parameters in the store.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub hidden: usize,
    pub vocab_size: usize,
    sentence: GruParams,
    question: GruParams,
}

/// Tape handles for the encoder weights.
pub struct EncoderVars {
    pub embed: Var,
    pub sentence: GruVars,
    pub question: GruVars,
    pub sgru: SgruVars,
}

/// Tape handles for the SGRU weights.
#[derive(Clone, Copy, Debug)]
pub struct SgruVars {
    pub uz: Var,
    pub wz: Var,
    pub xz: Var,
    pub ur: Var,
    pub wh: Var,
    pub uh: Var,
}

impl EncoderParams {
    /// Register embedding (uniform in [-sqrt(3), sqrt(3)]), both encoder
    /// GRUs, and the SGRU weights (Xavier-normal).
    pub fn init(
        store: &mut ParamStore,
        vocab_size: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = hidden;
        let bound = 3.0_f64.sqrt();
        store.insert(
            "enc.embed",
            Shape::Matrix(vocab_size, n),
            crate::gru::uniform_pm(rng, bound, vocab_size * n),
        );
        let sentence = GruParams::init(store, "enc.sent", n, n, rng);
        let question = GruParams::init(store, "enc.quest", n, n, rng);
        for name in ["sgru.uz", "sgru.wz", "sgru.xz", "sgru.wh", "sgru.uh"] {
            store.insert(name, Shape::Matrix(n, n), xavier_normal(rng, n, n, n * n));
        }
        store.insert("sgru.ur", Shape::Matrix(n, 1), xavier_normal(rng, 1, n, n));
        EncoderParams { hidden, vocab_size, sentence, question }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> EncoderVars {
        EncoderVars {
            embed: tape.param(store, "enc.embed"),
            sentence: self.sentence.bind(tape, store),
            question: self.question.bind(tape, store),
            sgru: SgruVars {
                uz: tape.param(store, "sgru.uz"),
                wz: tape.param(store, "sgru.wz"),
                xz: tape.param(store, "sgru.xz"),
                ur: tape.param(store, "sgru.ur"),
                wh: tape.param(store, "sgru.wh"),
                uh: tape.param(store, "sgru.uh"),
            },
        }
    }
}

/// Per-story accumulation: `d[word]` is the sum of every accumulation-GRU
/// output emitted at an occurrence of that word so far; `carry` is the
/// final hidden state of the previous sentence.
#[derive(Default)]
pub struct AccumulationState {
    pub d: IndexMap<WordId, Var>,
    carry: Option<Var>,
}

impl AccumulationState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Embedding-row lookup; differentiable into that row only.
/// Panics if the id is out of range.
pub fn embed(tape: &mut Tape, enc: &EncoderVars, id: WordId) -> Var {
    tape.row(enc.embed, id)
}

/// Run the accumulation GRU over one sentence. The hidden state starts at
/// zero at story start and carries across sentences; each step's output is
/// added into `state.d[word]`. Returns the final hidden state `w_N`.
/// Panics on an empty sentence.
pub fn encode_sentence(
    tape: &mut Tape,
    enc: &EncoderVars,
    sentence: &[WordId],
    state: &mut AccumulationState,
) -> Var {
    assert!(!sentence.is_empty(), "encode_sentence: empty sentence");
    let n = match tape.shape(enc.embed) {
        Shape::Matrix(_, n) => n,
        _ => unreachable!(),
    };
    let mut h = state.carry.unwrap_or_else(|| tape.filled(Shape::Vector(n), 0.0));
    for &word in sentence {
        let x = embed(tape, enc, word);
        h = gru_step(tape, &enc.sentence, x, h);
        let entry = match state.d.get(&word) {
            Some(&prev) => tape.add(prev, h),
            None => h,
        };
        state.d.insert(word, entry);
    }
    state.carry = Some(h);
    h
}

/// Encode a question with the question GRU: fresh zero state, no
/// accumulation writes. Panics on an empty question.
pub fn encode_question(tape: &mut Tape, enc: &EncoderVars, question: &[WordId]) -> Var {
    assert!(!question.is_empty(), "encode_question: empty question");
    let n = match tape.shape(enc.embed) {
        Shape::Matrix(_, n) => n,
        _ => unreachable!(),
    };
    let mut h = tape.filled(Shape::Vector(n), 0.0);
    for &word in question {
        let x = embed(tape, enc, word);
        h = gru_step(tape, &enc.question, x, h);
    }
    h
}

/// One SGRU step:
///   z = sigmoid(Uz w_in + Wz q + Xz s_prev)
///   r = 1 - sigmoid(Ur <s_prev, q>)
///   s~ = sigmoid(Wh w_in + Uh (r .* s_prev))
///   s = z .* s_prev + (1 - z) .* s~
/// Every output entry stays in [0,1]: both mixed terms do.
pub fn sgru_step(tape: &mut Tape, sg: &SgruVars, w_in: Var, s_prev: Var, q: Var) -> Var {
    let z = {
        let a = tape.matmul(sg.uz, w_in);
        let b = tape.matmul(sg.wz, q);
        let c = tape.matmul(sg.xz, s_prev);
        let s = tape.add(a, b);
        let s = tape.add(s, c);
        tape.sigmoid(s)
    };
    let r = {
        let sim = tape.dot(s_prev, q);
        let lifted = tape.matmul(sg.ur, sim);
        let sig = tape.sigmoid(lifted);
        tape.one_minus(sig)
    };
    let s_tilde = {
        let gated = tape.hadamard(r, s_prev);
        let a = tape.matmul(sg.wh, w_in);
        let b = tape.matmul(sg.uh, gated);
        let s = tape.add(a, b);
        tape.sigmoid(s)
    };
    let keep = tape.hadamard(z, s_prev);
    let one_minus_z = tape.one_minus(z);
    let fresh = tape.hadamard(one_minus_z, s_tilde);
    tape.add(keep, fresh)
}

/// Apply [`sgru_step`] across aligned entity states and strengths.
/// Panics on a length mismatch.
pub fn sgru(
    tape: &mut Tape,
    sg: &SgruVars,
    states: &[Var],
    prev_strengths: &[Var],
    q: Var,
) -> Vec<Var> {
    assert_eq!(
        states.len(),
        prev_strengths.len(),
        "sgru: {} states vs {} strengths",
        states.len(),
        prev_strengths.len()
    );
    states
        .iter()
        .zip(prev_strengths)
        .map(|(&w, &s)| sgru_step(tape, sg, w, s, q))
        .collect()
}

/// First-use strength draw: Xavier-normal clamped into [0,1].
pub fn initial_strength(tape: &mut Tape, hidden: usize, rng: &mut ChaCha8Rng) -> Var {
    let mut vals = xavier_normal(rng, hidden, hidden, hidden);
    for v in &mut vals {
        *v = v.clamp(0.0, 1.0);
    }
    tape.leaf(Shape::Vector(hidden), vals)
}
