//! The scripted three-sentence scenario shared by the scenario suite and
//! the acceptance checks: gate decisions are forced to a fixed script and
//! the resulting memory layout is returned for inspection.

use indexmap::IndexSet;
use membank::autodiff::{ParamStore, Tape};
use membank::decoder::{decode, entities_examined, BankSpan, DecoderParams};
use membank::encoder::{
    encode_question, encode_sentence, AccumulationState, EncoderParams, Vocabulary, WordId,
};
use membank::memory::{
    step_sentence, ControllerPolicy, Memory, MemoryParams, SemanticGraph, StepOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct ScenarioOutcome {
    pub bank_count: usize,
    /// Words held by the second bank, in insertion order.
    pub second_bank: Vec<String>,
    /// The second bank's graph-view edges as word pairs.
    pub view_edges: IndexSet<(String, String)>,
    /// Entities touched by a newest-bank-only decode.
    pub examined: usize,
    pub first_bank_len: usize,
    pub vocab_len: usize,
    /// Logit count returned by the newest-bank-only decode.
    pub logit_len: usize,
}

fn ids(vocab: &mut Vocabulary, words: &str) -> Vec<WordId> {
    words.split_whitespace().map(|w| vocab.intern(w)).collect()
}

/// Run the scenario: three sentences, one question, and a script that
/// keeps one bank at t=0, grows and copies `john`/`apple` at t=1, and
/// copies `john`/`garden`/`the` at t=2.
pub fn run() -> ScenarioOutcome {
    let mut vocab = Vocabulary::new();
    let s1 = ids(&mut vocab, "john bought an apple");
    let s2 = ids(&mut vocab, "mary walked to the office");
    let s3 = ids(&mut vocab, "john journeyed to the garden");
    let q = ids(&mut vocab, "where is the apple");
    let (john, apple) = (s1[0], s1[3]);
    let (the, garden) = (s3[3], s3[4]);

    let hidden = 8;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let encp = EncoderParams::init(&mut store, vocab.len(), hidden, &mut rng);
    let memp = MemoryParams::init(&mut store, hidden, &mut rng);
    let decp = DecoderParams::init(&mut store, vocab.len(), hidden, 1.0, &mut rng);

    let mut tape = Tape::new();
    let enc = encp.bind(&mut tape, &store);
    let mem_vars = memp.bind(&mut tape, &store);
    let dec = decp.bind(&mut tape, &store);
    let q_enc = encode_question(&mut tape, &enc, &q);

    let policy = ControllerPolicy::Scripted {
        new_bank: vec![false, true, false],
        moves: vec![vec![], vec![john, apple], vec![john, garden, the]],
    };
    let opts = StepOptions::default();
    let mut accum = AccumulationState::new();
    let mut memory = Memory::new();
    let mut graph = SemanticGraph::new();
    let mut step_rng = ChaCha8Rng::seed_from_u64(0);
    for (t, sentence) in [&s1, &s2, &s3].into_iter().enumerate() {
        let w_n = encode_sentence(&mut tape, &enc, sentence, &mut accum);
        step_sentence(
            &mut tape, &mem_vars, &enc.sgru, &mut memory, &mut graph, sentence, &accum.d,
            w_n, q_enc, t, &policy, &opts, &mut step_rng,
        );
    }

    let logits = decode(&mut tape, &dec, &memory, q_enc, BankSpan::Last(1)).unwrap();
    let (examined, _) = entities_examined(&memory, BankSpan::Last(1), vocab.len());
    let name = |w: WordId| vocab.word_of(w).to_string();
    ScenarioOutcome {
        bank_count: memory.banks.len(),
        second_bank: memory.banks[1].words().map(name).collect(),
        view_edges: memory.banks[1]
            .view_edges
            .iter()
            .map(|&(u, v)| (name(u), name(v)))
            .collect(),
        examined,
        first_bank_len: memory.banks[0].len(),
        vocab_len: vocab.len(),
        logit_len: tape.value(logits).len(),
    }
}
