//! Training loop, evaluation with bank-truncation search, checkpoint and
//! metrics persistence.
//!
//! Stories are batch size 1 (the tape shape depends on the story);
//! gradients accumulate over a configurable window before each Adam
//! step. The learning rate halves on a validation-loss plateau, and
//! training stops early once validation error stays under 5% for three
//! epochs in a row. Everything is deterministic in (seed, config, data).

use crate::autodiff::{ParamStore, Shape, Tape};
use crate::decoder::BankSpan;
use crate::encoder::Vocabulary;
use crate::loss::BankPrior;
use crate::memory::{ControllerPolicy, DecisionMode, MoveScoring, StepOptions};
use crate::model::Model;
use crate::tasks::Example;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Validation error must stay below this for [`EARLY_STOP_STREAK`]
/// consecutive epochs to stop training early.
pub const EARLY_STOP_ERROR: f64 = 0.05;
pub const EARLY_STOP_STREAK: usize = 3;

/// All run settings, readable from a flat `key=value` UTF-8 file.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub hidden: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Epochs without validation-loss improvement before halving the rate.
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub epochs: usize,
    /// Growth-gate prior and its per-sentence annealing rate.
    pub p_hat: f64,
    pub beta: f64,
    pub r_max: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Banks consulted when decoding at evaluation; `None` = all.
    pub banks_to_use: Option<usize>,
    /// Stories whose gradients accumulate into one optimizer step.
    pub accumulation: usize,
    pub recency_boost: f64,
    pub cumulative_propagation: bool,
    pub move_scoring: MoveScoring,
    pub relevance_by_distance: bool,
    /// Stop once validation error stays under 5% for three epochs.
    pub early_stop: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            hidden: 32,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            plateau_patience: 5,
            lr_decay: 0.5,
            epochs: 200,
            p_hat: 0.8,
            beta: 0.1,
            r_max: 3,
            alpha: 1.0,
            seed: 0,
            banks_to_use: None,
            accumulation: 32,
            recency_boost: 1.5,
            cumulative_propagation: true,
            move_scoring: MoveScoring::GatedState,
            relevance_by_distance: true,
            early_stop: true,
        }
    }
}

impl Config {
    /// Parse a flat `key=value` file; missing keys keep their defaults,
    /// unknown keys and bad values are errors. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Config(format!(
                    "config line {}: {key}={value:?} is not a valid {what}",
                    lineno + 1
                ))
            };
            match key {
                "hidden" => cfg.hidden = value.parse().map_err(|_| bad("integer"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("number"))?,
                "beta1" => cfg.beta1 = value.parse().map_err(|_| bad("number"))?,
                "beta2" => cfg.beta2 = value.parse().map_err(|_| bad("number"))?,
                "plateau_patience" => {
                    cfg.plateau_patience = value.parse().map_err(|_| bad("integer"))?
                }
                "lr_decay" => cfg.lr_decay = value.parse().map_err(|_| bad("number"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("integer"))?,
                "p_hat" => cfg.p_hat = value.parse().map_err(|_| bad("number"))?,
                "beta" => cfg.beta = value.parse().map_err(|_| bad("number"))?,
                "r_max" => cfg.r_max = value.parse().map_err(|_| bad("integer"))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("number"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "banks_to_use" => {
                    cfg.banks_to_use = if value == "all" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| bad("bank count or \"all\""))?)
                    }
                }
                "accumulation" => cfg.accumulation = value.parse().map_err(|_| bad("integer"))?,
                "recency_boost" => {
                    cfg.recency_boost = value.parse().map_err(|_| bad("number"))?
                }
                "cumulative_propagation" => {
                    cfg.cumulative_propagation = value.parse().map_err(|_| bad("bool"))?
                }
                "move_scoring" => {
                    cfg.move_scoring = match value {
                        "gated_state" => MoveScoring::GatedState,
                        "strength" => MoveScoring::Strength,
                        _ => return Err(bad("move scoring (gated_state|strength)")),
                    }
                }
                "relevance_by_distance" => {
                    cfg.relevance_by_distance = value.parse().map_err(|_| bad("bool"))?
                }
                "early_stop" => cfg.early_stop = value.parse().map_err(|_| bad("bool"))?,
                _ => {
                    return Err(Error::Config(format!(
                        "config line {}: unknown key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`Config::parse`]: every field, one per line.
    pub fn to_text(&self) -> String {
        let banks = match self.banks_to_use {
            None => "all".to_string(),
            Some(k) => k.to_string(),
        };
        let scoring = match self.move_scoring {
            MoveScoring::GatedState => "gated_state",
            MoveScoring::Strength => "strength",
        };
        format!(
            "hidden={}\nlr={}\nbeta1={}\nbeta2={}\nplateau_patience={}\nlr_decay={}\n\
             epochs={}\np_hat={}\nbeta={}\nr_max={}\nalpha={}\nseed={}\nbanks_to_use={}\n\
             accumulation={}\nrecency_boost={}\ncumulative_propagation={}\n\
             move_scoring={}\nrelevance_by_distance={}\nearly_stop={}\n",
            self.hidden,
            self.lr,
            self.beta1,
            self.beta2,
            self.plateau_patience,
            self.lr_decay,
            self.epochs,
            self.p_hat,
            self.beta,
            self.r_max,
            self.alpha,
            self.seed,
            banks,
            self.accumulation,
            self.recency_boost,
            self.cumulative_propagation,
            scoring,
            self.relevance_by_distance,
            self.early_stop,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.hidden >= 1, "hidden size must be >= 1")?;
        check(self.lr > 0.0, "learning rate must be positive")?;
        check(self.beta1 > 0.0 && self.beta1 < 1.0, "beta1 must be in (0,1)")?;
        check(self.beta2 > 0.0 && self.beta2 < 1.0, "beta2 must be in (0,1)")?;
        check(self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr_decay must be in (0,1]")?;
        check(self.p_hat > 0.0 && self.p_hat <= 1.0, "p_hat must be in (0,1]")?;
        check(self.beta > 0.0, "beta must be positive")?;
        check(self.r_max >= 1, "r_max must be >= 1")?;
        check(self.accumulation >= 1, "accumulation window must be >= 1")?;
        check(self.recency_boost > 0.0, "recency_boost must be positive")?;
        check(self.banks_to_use != Some(0), "banks_to_use must be >= 1 or \"all\"")?;
        Ok(())
    }

    pub fn span(&self) -> BankSpan {
        match self.banks_to_use {
            None => BankSpan::All,
            Some(k) => BankSpan::Last(k),
        }
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            r_max: self.r_max,
            cumulative: self.cumulative_propagation,
            recency_boost: self.recency_boost,
            move_scoring: self.move_scoring,
        }
    }
}

/// Build the model and its freshly initialized parameters for a config.
pub fn build_model(cfg: &Config, vocab_size: usize) -> Result<(Model, ParamStore)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::init(
        &mut store,
        vocab_size,
        cfg.hidden,
        cfg.alpha,
        BankPrior::new(cfg.p_hat, cfg.beta),
        cfg.step_options(),
        cfg.relevance_by_distance,
        &mut rng,
    );
    Ok((model, store))
}

/// Adam with bias correction; consumes and clears accumulated gradients.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: indexmap::IndexMap<String, Vec<f64>>,
    v: indexmap::IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &Config) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            t: 0,
            m: indexmap::IndexMap::new(),
            v: indexmap::IndexMap::new(),
        }
    }

    /// One update from the gradients in `store`, each scaled by `scale`
    /// (1/window for accumulated means). Gradients are zeroed after.
    pub fn step(&mut self, store: &mut ParamStore, scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in store.iter_mut() {
            let Some(grad) = tensor.grad.take() else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Stable per-(epoch, story) seed derivation.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x517c_c1b7_2722_0a95;
    for v in [a, b] {
        h ^= v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h = h.rotate_left(27).wrapping_mul(0x2545_f491_4f6c_dd1d);
    }
    h
}

/// Relevance-target seed for a story: stable across epochs so the
/// strength supervision does not jitter.
fn relevance_seed(seed: u64, story: usize) -> u64 {
    mix(seed, story as u64, 0xae1e)
}

/// One line of the metrics stream per epoch.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_answer: f64,
    pub loss_strength: f64,
    pub loss_bank: f64,
    pub accuracy: f64,
    pub mean_banks_created: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

/// Closing line of the metrics stream.
#[derive(Clone, Debug, Serialize)]
pub struct FinalSummary {
    pub summary: bool,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub val_accuracy: f64,
    pub mean_banks_created: f64,
    pub required_banks: usize,
    pub required_banks_reached: bool,
    pub entity_ratio: f64,
    /// Per-bank entity totals over the validation set (heatmap column sums).
    pub bank_entity_totals: Vec<u64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub rows: Vec<EpochRow>,
    pub summary: FinalSummary,
}

/// Render the metrics stream: one JSON object per epoch, then the summary.
pub fn metrics_jsonl(rows: &[EpochRow], summary: &FinalSummary) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(summary)?);
    out.push('\n');
    Ok(out)
}

/// Train on `train_set`, validating each epoch on `val_set`. Decoding
/// consults all banks and gate decisions are sampled during training;
/// validation runs deterministic thresholded decisions. The returned
/// checkpoint and summary describe the epoch with the best validation
/// accuracy, not necessarily the last.
pub fn train(
    cfg: &Config,
    train_set: &[Example],
    val_set: &[Example],
    vocab: &Vocabulary,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let (model, mut store) = build_model(cfg, vocab.len())?;
    let mut adam = Adam::new(cfg);
    let mut rows = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best: Option<(f64, ParamStore)> = None;
    let mut plateau = 0usize;
    let mut streak = 0usize;
    let mut early_stopped = false;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0x5f));
        order.shuffle(&mut shuffle_rng);

        let mut sums = [0.0_f64; 4];
        let mut correct = 0usize;
        let mut questions = 0usize;
        let mut banks = 0usize;
        let mut pending = 0usize;
        for (pos, &idx) in order.iter().enumerate() {
            let ex = &train_set[idx];
            let mut tape = Tape::new();
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1 + epoch as u64, idx as u64));
            let (loss, run) = model.run_story(
                &mut tape,
                &store,
                ex,
                &ControllerPolicy::Learned(DecisionMode::Sample),
                BankSpan::All,
                relevance_seed(cfg.seed, idx),
                &mut rng,
            )?;
            if run.loss_total.is_nan() {
                let op = tape.first_nan().unwrap_or_else(|| "unknown".into());
                return Err(Error::Diverged(format!(
                    "loss became NaN at epoch {epoch}, story {idx}; first NaN-producing \
                     operation: {op}"
                )));
            }
            tape.backward(loss);
            tape.export_grads(&mut store);
            pending += 1;
            if pending == cfg.accumulation || pos + 1 == order.len() {
                adam.step(&mut store, 1.0 / pending as f64);
                pending = 0;
            }
            sums[0] += run.loss_total;
            sums[1] += run.loss_answer;
            sums[2] += run.loss_strength;
            sums[3] += run.loss_bank;
            correct += run.correct;
            questions += run.questions;
            banks += run.bank_sizes.len();
        }

        let val = evaluate(&model, &store, val_set, BankSpan::All, cfg.seed)?;
        let n = train_set.len() as f64;
        let row = EpochRow {
            epoch,
            loss_total: sums[0] / n,
            loss_answer: sums[1] / n,
            loss_strength: sums[2] / n,
            loss_bank: sums[3] / n,
            accuracy: if questions > 0 { correct as f64 / questions as f64 } else { 0.0 },
            mean_banks_created: banks as f64 / n,
            val_loss: val.mean_loss,
            val_accuracy: val.accuracy,
            lr: adam.lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (answer {:.4}) train acc {:.3} val acc {:.3} \
             banks {:.2} lr {:.5}",
            row.loss_total,
            row.loss_answer,
            row.accuracy,
            row.val_accuracy,
            row.mean_banks_created,
            row.lr
        );
        rows.push(row);
        epochs_run = epoch + 1;

        if best.as_ref().is_none_or(|(acc, _)| val.accuracy > *acc) {
            best = Some((val.accuracy, store.clone()));
        }
        if val.mean_loss < best_val - 1e-9 {
            best_val = val.mean_loss;
            plateau = 0;
        } else {
            plateau += 1;
            if plateau >= cfg.plateau_patience {
                adam.lr *= cfg.lr_decay;
                plateau = 0;
            }
        }
        if cfg.early_stop {
            if 1.0 - val.accuracy < EARLY_STOP_ERROR {
                streak += 1;
                if streak >= EARLY_STOP_STREAK {
                    early_stopped = true;
                    break;
                }
            } else {
                streak = 0;
            }
        }
    }

    let store = best.map_or(store, |(_, s)| s);
    let final_eval = evaluate(&model, &store, val_set, BankSpan::All, cfg.seed)?;
    let req = required_banks(&model, &store, val_set, 0.95, cfg.seed)?;
    let mut totals = Vec::new();
    for sizes in &final_eval.bank_sizes {
        for (b, &count) in sizes.iter().enumerate() {
            if totals.len() <= b {
                totals.resize(b + 1, 0u64);
            }
            totals[b] += count as u64;
        }
    }
    let summary = FinalSummary {
        summary: true,
        epochs_run,
        early_stopped,
        val_accuracy: final_eval.accuracy,
        mean_banks_created: final_eval.mean_banks,
        required_banks: req.k,
        required_banks_reached: req.reached,
        entity_ratio: req.examined_ratio,
        bank_entity_totals: totals,
    };
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        vocab: vocab.clone(),
        store,
    };
    Ok(TrainOutcome { checkpoint, rows, summary })
}

/// Deterministic evaluation numbers for one dataset and span.
#[derive(Clone, Debug)]
pub struct EvalStats {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Mean bank count per story at story end.
    pub mean_banks: f64,
    /// Mean entities consulted per question and that count over vocab size.
    pub examined: f64,
    pub examined_ratio: f64,
    /// Final per-bank entity counts, one row per story.
    pub bank_sizes: Vec<Vec<usize>>,
    pub questions: usize,
}

/// Evaluate with thresholded gate decisions and decoding limited to
/// `span`. Deterministic in (parameters, dataset, seed).
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    set: &[Example],
    span: BankSpan,
    seed: u64,
) -> Result<EvalStats> {
    let mut correct = 0usize;
    let mut questions = 0usize;
    let mut loss = 0.0;
    let mut banks = 0usize;
    let mut examined = 0.0;
    let mut ratio = 0.0;
    let mut with_questions = 0usize;
    let mut bank_sizes = Vec::with_capacity(set.len());
    for (idx, ex) in set.iter().enumerate() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, idx as u64, 0xe7a1));
        let (_, run) = model.run_story(
            &mut tape,
            store,
            ex,
            &ControllerPolicy::Learned(DecisionMode::Threshold),
            span,
            relevance_seed(seed, idx),
            &mut rng,
        )?;
        correct += run.correct;
        questions += run.questions;
        loss += run.loss_total;
        banks += run.bank_sizes.len();
        if run.questions > 0 {
            examined += run.examined;
            ratio += run.examined_ratio;
            with_questions += 1;
        }
        bank_sizes.push(run.bank_sizes);
    }
    let n = set.len().max(1) as f64;
    let q = with_questions.max(1) as f64;
    Ok(EvalStats {
        accuracy: if questions > 0 { correct as f64 / questions as f64 } else { 0.0 },
        mean_loss: loss / n,
        mean_banks: banks as f64 / n,
        examined: examined / q,
        examined_ratio: ratio / q,
        bank_sizes,
        questions,
    })
}

/// Result of the bank-truncation search.
#[derive(Clone, Debug)]
pub struct RequiredBanksReport {
    pub k: usize,
    /// False when no truncation reached the threshold and `k` fell back
    /// to the widest span.
    pub reached: bool,
    pub accuracy: f64,
    pub examined_ratio: f64,
    pub max_banks: usize,
}

/// Smallest `k` such that decoding only the last `k` banks reaches
/// `threshold` accuracy; falls back to the maximum bank count (flagged)
/// when none does.
pub fn required_banks(
    model: &Model,
    store: &ParamStore,
    set: &[Example],
    threshold: f64,
    seed: u64,
) -> Result<RequiredBanksReport> {
    let full = evaluate(model, store, set, BankSpan::All, seed)?;
    let max_banks = full.bank_sizes.iter().map(|s| s.len()).max().unwrap_or(1);
    for k in 1..=max_banks {
        let e = evaluate(model, store, set, BankSpan::Last(k), seed)?;
        if e.accuracy >= threshold {
            return Ok(RequiredBanksReport {
                k,
                reached: true,
                accuracy: e.accuracy,
                examined_ratio: e.examined_ratio,
                max_banks,
            });
        }
    }
    Ok(RequiredBanksReport {
        k: max_banks,
        reached: false,
        accuracy: full.accuracy,
        examined_ratio: full.examined_ratio,
        max_banks,
    })
}

/// Entity-count matrix as CSV: one row per bank, one column per story,
/// empty cells where a story never created that bank.
pub fn heatmap_csv(bank_sizes: &[Vec<usize>]) -> String {
    let max_banks = bank_sizes.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = String::from("bank");
    for i in 0..bank_sizes.len() {
        out.push_str(&format!(",story_{i}"));
    }
    out.push('\n');
    for b in 0..max_banks {
        out.push_str(&b.to_string());
        for sizes in bank_sizes {
            match sizes.get(b) {
                Some(c) => out.push_str(&format!(",{c}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"MBCK";

/// Self-describing parameter container: version, config echo, vocabulary
/// and named tensors with little-endian 64-bit values. Reload is
/// bit-exact.
pub struct Checkpoint {
    pub version: u32,
    pub config: Config,
    pub vocab: Vocabulary,
    pub store: ParamStore,
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        write_bytes(&mut out, self.config.to_text().as_bytes());
        let words: Vec<&str> = self.vocab.words().collect();
        out.extend_from_slice(&(words.len() as u64).to_le_bytes());
        for w in words {
            write_bytes(&mut out, w.as_bytes());
        }
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for (name, tensor) in self.store.iter() {
            write_bytes(&mut out, name.as_bytes());
            match tensor.shape {
                Shape::Vector(n) => {
                    out.push(0);
                    out.extend_from_slice(&(n as u64).to_le_bytes());
                }
                Shape::Matrix(r, c) => {
                    out.push(1);
                    out.extend_from_slice(&(r as u64).to_le_bytes());
                    out.extend_from_slice(&(c as u64).to_le_bytes());
                }
            }
            out.extend_from_slice(&(tensor.values.len() as u64).to_le_bytes());
            for v in &tensor.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = Config::parse(&r.string()?)?;
        let word_count = r.u64()? as usize;
        let mut vocab = Vocabulary::new();
        for _ in 0..word_count {
            let w = r.string()?;
            vocab.intern(&w);
        }
        let tensor_count = r.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..tensor_count {
            let name = r.string()?;
            let shape = match r.u8()? {
                0 => Shape::Vector(r.u64()? as usize),
                1 => Shape::Matrix(r.u64()? as usize, r.u64()? as usize),
                tag => {
                    return Err(Error::Checkpoint(format!("unknown shape tag {tag}")));
                }
            };
            let count = r.u64()? as usize;
            if count != shape.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {shape:?} does not match {count} values"
                )));
            }
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            store.insert(&name, shape, values);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint data",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint { version, config, vocab, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Checkpoint::from_bytes(&buf)
    }
}

/// Rebuild the model around a checkpoint's parameters.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, ParamStore)> {
    let (model, mut store) = build_model(&ckpt.config, ckpt.vocab.len())?;
    if store.len() != ckpt.store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors for this config, checkpoint holds {}",
            store.len(),
            ckpt.store.len()
        )));
    }
    for (name, tensor) in ckpt.store.iter() {
        let slot = store.try_get_mut(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint tensor {name} is not part of the model"))
        })?;
        if slot.shape != tensor.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: config implies {:?}, checkpoint holds {:?}",
                slot.shape, tensor.shape
            )));
        }
        slot.values.clone_from(&tensor.values);
        slot.grad = None;
    }
    Ok((model, store))
}

/// Re-express examples parsed under `from` in the checkpoint vocabulary
/// `to`; any word the checkpoint never saw is an error.
pub fn remap_examples(
    examples: &[Example],
    from: &Vocabulary,
    to: &Vocabulary,
) -> Result<Vec<Example>> {
    let map_word = |w: usize| -> Result<usize> {
        let word = from.word_of(w);
        to.id_of(word).ok_or_else(|| {
            Error::VocabMismatch(format!(
                "dataset word {word:?} is not in the checkpoint vocabulary \
                 ({} words)",
                to.len()
            ))
        })
    };
    examples
        .iter()
        .map(|ex| {
            let story = ex
                .story
                .iter()
                .map(|s| s.iter().map(|&w| map_word(w)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let questions = ex
                .questions
                .iter()
                .map(|q| {
                    Ok(crate::tasks::Question {
                        words: q.words.iter().map(|&w| map_word(w)).collect::<Result<
                            Vec<_>,
                        >>()?,
                        answer: map_word(q.answer)?,
                        support: q.support.clone(),
                        asked_after: q.asked_after,
                        raw: q.raw.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Example { story, questions, task_id: ex.task_id, raw: ex.raw.clone() })
        })
        .collect()
}
