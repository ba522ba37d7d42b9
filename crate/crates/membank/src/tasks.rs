//! bAbI-format story ingestion and synthetic story generation.
//!
//! The text format is the standard bAbI layout: numbered lines, one
//! sentence or question each; question lines carry tab-separated answer
//! and supporting line numbers; the line counter resetting to 1 starts a
//! new story. Tokens are lowercased with sentence punctuation dropped;
//! answer fields are kept verbatim as single tokens (comma lists stay one
//! token).
//!
//! Only the single-supporting-fact family is generated natively (base,
//! scaled entity pool, several questions per story); other tasks enter
//! through [`parse_babi`] from external files.

use crate::encoder::{Vocabulary, WordId};
use crate::{Error, Result};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;

/// One question about a story prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Question {
    pub words: Vec<WordId>,
    pub answer: WordId,
    /// Indices into the story's sentence list.
    pub support: Vec<usize>,
    /// How many story sentences precede this question.
    pub asked_after: usize,
    /// The line tail as it appears in the file (no line number).
    pub raw: String,
}

/// One story with its questions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub story: Vec<Vec<WordId>>,
    pub questions: Vec<Question>,
    pub task_id: usize,
    /// Sentence line tails as they appear in the file.
    pub raw: Vec<String>,
}

/// Task families. Only [`TaskKind::SingleSupportingFact`] has a native
/// generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    SingleSupportingFact,
    TwoSupportingFacts,
    Counting,
    PathFinding,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SingleSupportingFact => "single_supporting_fact",
            TaskKind::TwoSupportingFacts => "two_supporting_facts",
            TaskKind::Counting => "counting",
            TaskKind::PathFinding => "path_finding",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_supporting_fact" => Ok(TaskKind::SingleSupportingFact),
            "two_supporting_facts" => Ok(TaskKind::TwoSupportingFacts),
            "counting" => Ok(TaskKind::Counting),
            "path_finding" => Ok(TaskKind::PathFinding),
            other => Err(Error::Config(format!(
                "unknown task kind {other:?}; known kinds: single_supporting_fact, \
                 two_supporting_facts, counting, path_finding"
            ))),
        }
    }
}

/// What to generate.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Size of the name pool; split evenly into actors and locations.
    pub entities: usize,
    /// Sentences per story.
    pub length: usize,
    /// Questions per story, all asked at story end.
    pub questions: usize,
    /// Stories to generate.
    pub stories: usize,
    pub seed: u64,
}

impl TaskSpec {
    fn validate(&self) -> Result<()> {
        if self.entities < 2 {
            return Err(Error::Config(format!(
                "need at least 2 entities (one actor, one location), got {}",
                self.entities
            )));
        }
        if self.length < 1 || self.questions < 1 || self.stories < 1 {
            return Err(Error::Config(
                "story length, questions per story, and story count must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Lowercase and split a sentence, dropping punctuation stuck to tokens.
fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| matches!(c, '.' | '?' | '!')).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Parse bAbI-format text into stories plus the vocabulary over all
/// tokens and answers. Line numbers are 1-based in errors.
pub fn parse_babi(text: &str) -> Result<(Vec<Example>, Vocabulary)> {
    let mut vocab = Vocabulary::new();
    let mut examples = Vec::new();
    let mut story: Vec<Vec<WordId>> = Vec::new();
    let mut raw: Vec<String> = Vec::new();
    let mut questions: Vec<Question> = Vec::new();
    // Line number within the story -> index into `story`.
    let mut linemap: IndexMap<usize, usize> = IndexMap::new();

    let flush = |story: &mut Vec<Vec<WordId>>,
                     raw: &mut Vec<String>,
                     questions: &mut Vec<Question>,
                     linemap: &mut IndexMap<usize, usize>,
                     examples: &mut Vec<Example>| {
        if !story.is_empty() || !questions.is_empty() {
            examples.push(Example {
                story: std::mem::take(story),
                questions: std::mem::take(questions),
                task_id: 0,
                raw: std::mem::take(raw),
            });
        }
        linemap.clear();
    };

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (num_str, tail) = line.split_once(' ').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected a line number followed by text".into(),
        })?;
        let n: usize = num_str.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad line number {num_str:?}"),
        })?;
        if n == 1 {
            flush(&mut story, &mut raw, &mut questions, &mut linemap, &mut examples);
        }
        if tail.contains('\t') {
            let parts: Vec<&str> = tail.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!(
                        "question lines need question\\tanswer\\tsupport, got {} fields",
                        parts.len()
                    ),
                });
            }
            let words: Vec<WordId> =
                tokenize(parts[0]).iter().map(|t| vocab.intern(t)).collect();
            if words.is_empty() {
                return Err(Error::Parse { line: lineno, msg: "empty question".into() });
            }
            let answer_token = parts[1].trim().to_lowercase();
            if answer_token.is_empty() {
                return Err(Error::Parse { line: lineno, msg: "empty answer".into() });
            }
            let answer = vocab.intern(&answer_token);
            let mut support = Vec::new();
            for s in parts[2].split_whitespace() {
                let sn: usize = s.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad supporting line number {s:?}"),
                })?;
                let idx = *linemap.get(&sn).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("supporting line {sn} is not a story sentence"),
                })?;
                support.push(idx);
            }
            questions.push(Question {
                words,
                answer,
                support,
                asked_after: story.len(),
                raw: tail.to_string(),
            });
        } else {
            let words: Vec<WordId> =
                tokenize(tail).iter().map(|t| vocab.intern(t)).collect();
            if words.is_empty() {
                return Err(Error::Parse { line: lineno, msg: "empty sentence".into() });
            }
            linemap.insert(n, story.len());
            story.push(words);
            raw.push(tail.to_string());
        }
    }
    flush(&mut story, &mut raw, &mut questions, &mut linemap, &mut examples);
    Ok((examples, vocab))
}

/// Render stories back into bAbI text (the inverse of [`parse_babi`]).
pub fn to_babi_text(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        let mut n = 1;
        for line in &ex.raw {
            out.push_str(&format!("{n} {line}\n"));
            n += 1;
        }
        for q in &ex.questions {
            out.push_str(&format!("{n} {}\n", q.raw));
            n += 1;
        }
    }
    out
}

const ACTOR_NAMES: [&str; 8] =
    ["mary", "john", "daniel", "sandra", "fred", "bill", "julie", "emma"];
const LOCATION_NAMES: [&str; 8] =
    ["bathroom", "hallway", "kitchen", "garden", "office", "bedroom", "park", "school"];
const MOVE_VERBS: [&str; 4] = ["moved", "went", "journeyed", "travelled"];

fn name_pool(base: &[&str], count: usize, synth: &str) -> Vec<String> {
    (0..count)
        .map(|i| {
            base.get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("{synth}{}", i + 1))
        })
        .collect()
}

/// Cast sizes for the askable core of a generated story. Entity pools
/// larger than the core do not add answer classes or question subjects;
/// the surplus shows up as background movers (see [`generate`]).
const CORE_ACTORS: usize = 4;
const CORE_LOCATIONS: usize = 4;
/// When the pool has surplus actors, the share of sentences spent on
/// background movers instead of the core cast.
const BACKGROUND_MOVE_RATE: f64 = 0.75;

/// Generate single-supporting-fact stories: actors move between
/// locations; each question asks where an actor is, answered by the
/// actor's latest location with that sentence as support. Questions are
/// asked at story end about actors that have moved. Entity pools beyond
/// the core cast (4 actors, 4 locations) turn into background movers:
/// they wander through all locations so every entity gets referenced,
/// but questions stay on the core cast — surplus entities add recall
/// load and vocabulary, not answer classes. Other task kinds are
/// rejected.
pub fn generate(spec: &TaskSpec) -> Result<(Vec<Example>, Vocabulary)> {
    spec.validate()?;
    if spec.kind != TaskKind::SingleSupportingFact {
        return Err(Error::Config(format!(
            "task kind {} has no native generator; supported: single_supporting_fact \
             (other kinds enter via parse)",
            spec.kind.name()
        )));
    }
    let actor_count = spec.entities / 2;
    let location_count = spec.entities - actor_count;
    let actors = name_pool(&ACTOR_NAMES, actor_count, "person");
    let locations = name_pool(&LOCATION_NAMES, location_count, "place");
    let core_actors = actor_count.min(CORE_ACTORS);
    let core_locations = location_count.min(CORE_LOCATIONS);
    let has_background = actor_count > core_actors;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vocab = Vocabulary::new();
    let mut examples = Vec::new();
    for _ in 0..spec.stories {
        // Latest location and the sentence that put the actor there.
        let mut latest: IndexMap<usize, (usize, usize)> = IndexMap::new();
        let mut story = Vec::new();
        let mut raw = Vec::new();
        for t in 0..spec.length {
            let (a, l) = if !has_background {
                (rng.gen_range(0..actors.len()), rng.gen_range(0..locations.len()))
            } else if rng.gen_bool(BACKGROUND_MOVE_RATE) {
                let a = core_actors + rng.gen_range(0..actor_count - core_actors);
                (a, rng.gen_range(0..locations.len()))
            } else {
                (rng.gen_range(0..core_actors), rng.gen_range(0..core_locations))
            };
            let verb = MOVE_VERBS[rng.gen_range(0..MOVE_VERBS.len())];
            let text = format!("{} {verb} to the {}.", actors[a], locations[l]);
            let words: Vec<WordId> =
                tokenize(&text).iter().map(|w| vocab.intern(w)).collect();
            story.push(words);
            raw.push(text);
            latest.insert(a, (l, t));
        }
        let mut candidates: Vec<usize> =
            latest.keys().copied().filter(|a| *a < core_actors).collect();
        if candidates.is_empty() {
            candidates = latest.keys().copied().collect();
        }
        candidates.shuffle(&mut rng);
        let mut questions = Vec::new();
        for i in 0..spec.questions {
            let a = candidates[i % candidates.len()];
            let (l, support) = latest[&a];
            let text = format!("where is {}?", actors[a]);
            let words: Vec<WordId> =
                tokenize(&text).iter().map(|w| vocab.intern(w)).collect();
            let answer = vocab.intern(&locations[l]);
            questions.push(Question {
                words,
                answer,
                support: vec![support],
                asked_after: spec.length,
                raw: format!("{text}\t{}\t{}", locations[l], support + 1),
            });
        }
        examples.push(Example { story, questions, task_id: 1, raw });
    }
    Ok((examples, vocab))
}

/// Deterministic shuffled split into train/validation/test. Fractions
/// must sum to 1 and every part must come out nonempty.
pub fn split(
    examples: &[Example],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 || ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::Split(format!(
            "fractions must be nonnegative and sum to 1, got ({ft}, {fv}, {fe})"
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n = examples.len();
    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fe).floor() as usize;
    let n_train = n - n_val - n_test;
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    let train = pick(&order[..n_train]);
    let val = pick(&order[n_train..n_train + n_val]);
    let test = pick(&order[n_train + n_val..]);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Split(format!(
            "split of {n} examples left an empty part ({}/{}/{})",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok((train, val, test))
}
