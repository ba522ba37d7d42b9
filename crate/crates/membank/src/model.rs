//! Full per-story pipeline: encode sentences and questions, run the
//! memory maintenance step per sentence, decode each question where it
//! is asked, and assemble the training loss.

use crate::autodiff::{ParamStore, Shape, Tape, Var};
use crate::decoder::{decode, entities_examined, BankSpan, DecoderParams};
use crate::encoder::{
    encode_question, encode_sentence, AccumulationState, EncoderParams, WordId,
};
use crate::loss::{
    answer_loss, bank_loss, expected_relevance, strength_loss, total_loss, BankPrior,
};
use crate::memory::{
    step_sentence, ControllerPolicy, Memory, MemoryParams, SemanticGraph, StepOptions,
};
use crate::tasks::{Example, Question};
use crate::Result;
use rand_chacha::ChaCha8Rng;

/// Parameter shapes and story-processing knobs for the whole network.
pub struct Model {
    pub encoder: EncoderParams,
    pub memory: MemoryParams,
    pub decoder: DecoderParams,
    pub prior: BankPrior,
    pub opts: StepOptions,
    /// Decay relevance targets by hop distance from the answers.
    pub relevance_by_distance: bool,
}

/// Scalar outcome of one story pass.
#[derive(Clone, Debug, Default)]
pub struct StoryRun {
    pub loss_total: f64,
    pub loss_answer: f64,
    pub loss_strength: f64,
    pub loss_bank: f64,
    /// Banks added while processing this story.
    pub banks_created: usize,
    /// Entity count per bank at story end.
    pub bank_sizes: Vec<usize>,
    pub correct: usize,
    pub questions: usize,
    /// Mean entities consulted per decode and that count over vocab size.
    pub examined: f64,
    pub examined_ratio: f64,
}

#[allow(clippy::too_many_arguments)]
impl Model {
    pub fn init(
        store: &mut ParamStore,
        vocab_size: usize,
        hidden: usize,
        alpha: f64,
        prior: BankPrior,
        opts: StepOptions,
        relevance_by_distance: bool,
        rng: &mut ChaCha8Rng,
    ) -> Model {
        let encoder = EncoderParams::init(store, vocab_size, hidden, rng);
        let memory = MemoryParams::init(store, hidden, rng);
        let decoder = DecoderParams::init(store, vocab_size, hidden, alpha, rng);
        Model { encoder, memory, decoder, prior, opts, relevance_by_distance }
    }

    /// Run one story on a fresh tape. Returns the scalar loss node
    /// (answer term plus per-sentence strength and growth terms) and the
    /// detached numbers for reporting. `policy` picks sampled or
    /// thresholded gate decisions (or a scripted sequence for probing);
    /// `span` limits how many banks decoding consults;
    /// `relevance_seed` fixes the relevance-target draws.
    pub fn run_story(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        example: &Example,
        policy: &ControllerPolicy,
        span: BankSpan,
        relevance_seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, StoryRun)> {
        let enc = self.encoder.bind(tape, store);
        let mem_vars = self.memory.bind(tape, store);
        let dec = self.decoder.bind(tape, store);
        let hidden = self.encoder.hidden;

        // Per-question encodings; their mean conditions the maintenance
        // step so one pass serves every question in the story.
        let q_encs: Vec<Var> = example
            .questions
            .iter()
            .map(|q| encode_question(tape, &enc, &q.words))
            .collect();
        let q_cond = match q_encs.split_first() {
            None => tape.filled(Shape::Vector(hidden), 0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &q in rest {
                    acc = tape.add(acc, q);
                }
                tape.scale_const(acc, 1.0 / q_encs.len() as f64)
            }
        };

        let mut accum = AccumulationState::new();
        let mut memory = Memory::new();
        let mut graph = SemanticGraph::new();
        let mut run = StoryRun { questions: example.questions.len(), ..Default::default() };
        let mut gate_ps = Vec::new();
        let mut m0_snapshots: Vec<Vec<(WordId, Var)>> = Vec::new();
        let mut lp_terms = Vec::new();

        let ask = |tape: &mut Tape,
                       memory: &Memory,
                       q: &Question,
                       q_enc: Var,
                       run: &mut StoryRun,
                       lp_terms: &mut Vec<Var>|
         -> Result<()> {
            let logits = match decode(tape, &dec, memory, q_enc, span) {
                Ok(l) => l,
                Err(crate::Error::EmptyDecode(n)) => {
                    // Nothing to read from: the question simply goes
                    // unanswered and scores as wrong.
                    log::debug!("all {n} consulted banks empty; question counts as missed");
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            lp_terms.push(answer_loss(tape, logits, q.answer)?);
            let vals = tape.value(logits);
            let pred = vals
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            if pred == q.answer {
                run.correct += 1;
            }
            let (count, ratio) = entities_examined(memory, span, self.decoder.vocab_size);
            run.examined += count as f64;
            run.examined_ratio += ratio;
            Ok(())
        };

        for (qi, q) in example.questions.iter().enumerate() {
            if q.asked_after == 0 {
                ask(tape, &memory, q, q_encs[qi], &mut run, &mut lp_terms)?;
            }
        }
        for (t, sentence) in example.story.iter().enumerate() {
            let w_n = encode_sentence(tape, &enc, sentence, &mut accum);
            let outcome = step_sentence(
                tape, &mem_vars, &enc.sgru, &mut memory, &mut graph, sentence, &accum.d,
                w_n, q_cond, t, policy, &self.opts, rng,
            );
            if outcome.created_bank {
                run.banks_created += 1;
            }
            gate_ps.push(outcome.p_new);
            m0_snapshots
                .push(memory.banks[0].entities.values().map(|e| (e.word, e.strength)).collect());
            for (qi, q) in example.questions.iter().enumerate() {
                if q.asked_after == t + 1 {
                    ask(tape, &memory, q, q_encs[qi], &mut run, &mut lp_terms)?;
                }
            }
        }

        // Relevance targets are drawn once against the finished story
        // graph; each sentence's strength term covers the entities the
        // first bank held at that point.
        let answers: Vec<WordId> = example.questions.iter().map(|q| q.answer).collect();
        let relevance =
            expected_relevance(&graph, &answers, relevance_seed, self.relevance_by_distance);
        let mut pairs = Vec::new();
        for (t, (snap, &p)) in m0_snapshots.iter().zip(&gate_ps).enumerate() {
            let mut summaries = Vec::with_capacity(snap.len());
            let mut targets = Vec::with_capacity(snap.len());
            for &(w, strength) in snap {
                summaries.push(tape.mean(strength));
                targets.push(relevance.targets[&w]);
            }
            let ls = strength_loss(tape, &summaries, &targets);
            let lb = bank_loss(tape, p, t + 1, &self.prior);
            run.loss_strength += tape.value_scalar(ls);
            run.loss_bank += tape.value_scalar(lb);
            pairs.push((ls, lb));
        }

        let lp = match lp_terms.split_first() {
            None => tape.scalar(0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = tape.add(acc, t);
                }
                tape.scale_const(acc, 1.0 / lp_terms.len() as f64)
            }
        };
        run.loss_answer = tape.value_scalar(lp);
        let total = total_loss(tape, lp, &pairs);
        run.loss_total = tape.value_scalar(total);
        run.bank_sizes = memory.banks.iter().map(|b| b.len()).collect();
        if run.questions > 0 {
            run.examined /= run.questions as f64;
            run.examined_ratio /= run.questions as f64;
        }
        Ok((total, run))
    }
}
