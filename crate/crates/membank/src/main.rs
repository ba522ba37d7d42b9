//! Command-line front end: generate stories, train, evaluate, search the
//! minimal bank span, and export the entity heatmap.

use clap::{Parser, Subcommand};
use membank::decoder::BankSpan;
use membank::harness::{
    evaluate, heatmap_csv, metrics_jsonl, model_from_checkpoint, remap_examples,
    required_banks, train, Checkpoint, Config, TrainOutcome,
};
use membank::tasks::{generate, parse_babi, split, to_babi_text, TaskSpec};
use membank::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "membank",
    version,
    about = "Question answering over stories with growable memory banks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic stories in the numbered-line text format.
    Generate {
        /// Task family (only single_supporting_fact has a generator).
        #[arg(long, default_value = "single_supporting_fact")]
        task: String,
        /// Name-pool size, split evenly into actors and locations.
        #[arg(long, default_value_t = 8)]
        entities: usize,
        /// Sentences per story.
        #[arg(long, default_value_t = 6)]
        length: usize,
        /// Questions per story, asked at story end.
        #[arg(long, default_value_t = 1)]
        questions: usize,
        /// Number of stories.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output text file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a story file (80/10/10 train/val/test split); writes
    /// checkpoint.bin and metrics.jsonl into --out.
    Train {
        /// Flat key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Story file in the numbered-line text format.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list; each is trained and the best
        /// validation model is kept.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Evaluate a checkpoint on a story file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Banks consulted when decoding: a count or "all".
        #[arg(long, default_value = "all")]
        banks: String,
    },
    /// Smallest bank span whose accuracy reaches the threshold.
    RequiredBanks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        threshold: f64,
    },
    /// Write the per-bank entity-count CSV (rows = banks, columns = stories).
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_span(s: &str) -> Result<BankSpan> {
    if s == "all" {
        return Ok(BankSpan::All);
    }
    let k: usize =
        s.parse().map_err(|_| Error::Config(format!("--banks takes a count or \"all\", got {s:?}")))?;
    if k == 0 {
        return Err(Error::Config("--banks must be >= 1 or \"all\"".into()));
    }
    Ok(BankSpan::Last(k))
}

/// Load a checkpoint plus a story file re-expressed in its vocabulary.
fn load_for_eval(
    checkpoint: &Path,
    data: &Path,
) -> Result<(membank::model::Model, membank::autodiff::ParamStore, Vec<membank::tasks::Example>, Config)>
{
    let ckpt = Checkpoint::load(checkpoint)?;
    let text = std::fs::read_to_string(data)?;
    let (examples, vocab) = parse_babi(&text)?;
    let examples = remap_examples(&examples, &vocab, &ckpt.vocab)?;
    let (model, store) = model_from_checkpoint(&ckpt)?;
    let config = ckpt.config;
    Ok((model, store, examples, config))
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate { task, entities, length, questions, n, seed, out } => {
            let spec = TaskSpec {
                kind: task.parse()?,
                entities,
                length,
                questions,
                stories: n,
                seed,
            };
            let (examples, _) = generate(&spec)?;
            std::fs::write(&out, to_babi_text(&examples))?;
            println!("wrote {} stories to {}", examples.len(), out.display());
        }
        Cmd::Train { config, data, out, seeds } => {
            let cfg = match config {
                Some(path) => Config::parse(&std::fs::read_to_string(path)?)?,
                None => Config::default(),
            };
            let text = std::fs::read_to_string(&data)?;
            let (examples, vocab) = parse_babi(&text)?;
            let (train_set, val_set, test_set) = split(&examples, (0.8, 0.1, 0.1), cfg.seed)?;
            let seed_list: Vec<u64> = match seeds {
                None => vec![cfg.seed],
                Some(s) => s
                    .split(',')
                    .map(|x| {
                        x.trim().parse().map_err(|_| {
                            Error::Config(format!("--seeds expects integers, got {x:?}"))
                        })
                    })
                    .collect::<Result<_>>()?,
            };
            let mut best: Option<TrainOutcome> = None;
            for seed in seed_list {
                let run_cfg = Config { seed, ..cfg.clone() };
                log::info!("training with seed {seed}");
                let outcome = train(&run_cfg, &train_set, &val_set, &vocab)?;
                let acc = outcome.summary.val_accuracy;
                log::info!(
                    "seed {seed}: val accuracy {acc:.4} after {} epochs",
                    outcome.summary.epochs_run
                );
                if best.as_ref().is_none_or(|b| acc > b.summary.val_accuracy) {
                    best = Some(outcome);
                }
            }
            let outcome = best.expect("at least one seed trains");
            std::fs::create_dir_all(&out)?;
            outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
            std::fs::write(
                out.join("metrics.jsonl"),
                metrics_jsonl(&outcome.rows, &outcome.summary)?,
            )?;
            let (model, store) = model_from_checkpoint(&outcome.checkpoint)?;
            let test = evaluate(
                &model,
                &store,
                &test_set,
                outcome.checkpoint.config.span(),
                outcome.checkpoint.config.seed,
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "val_accuracy": outcome.summary.val_accuracy,
                    "test_accuracy": test.accuracy,
                    "test_error": 1.0 - test.accuracy,
                    "epochs_run": outcome.summary.epochs_run,
                    "mean_banks_created": outcome.summary.mean_banks_created,
                    "checkpoint": out.join("checkpoint.bin").display().to_string(),
                })
            );
        }
        Cmd::Eval { checkpoint, data, banks } => {
            let span = parse_span(&banks)?;
            let (model, store, examples, cfg) = load_for_eval(&checkpoint, &data)?;
            let stats = evaluate(&model, &store, &examples, span, cfg.seed)?;
            println!(
                "{}",
                serde_json::json!({
                    "accuracy": stats.accuracy,
                    "error": 1.0 - stats.accuracy,
                    "mean_loss": stats.mean_loss,
                    "mean_banks_created": stats.mean_banks,
                    "entities_examined": stats.examined,
                    "entity_ratio": stats.examined_ratio,
                    "questions": stats.questions,
                })
            );
        }
        Cmd::RequiredBanks { checkpoint, data, threshold } => {
            let (model, store, examples, cfg) = load_for_eval(&checkpoint, &data)?;
            let report = required_banks(&model, &store, &examples, threshold, cfg.seed)?;
            println!(
                "{}",
                serde_json::json!({
                    "required_banks": report.k,
                    "reached_threshold": report.reached,
                    "accuracy": report.accuracy,
                    "entity_ratio": report.examined_ratio,
                    "max_banks": report.max_banks,
                })
            );
        }
        Cmd::Heatmap { checkpoint, data, out } => {
            let (model, store, examples, cfg) = load_for_eval(&checkpoint, &data)?;
            let stats = evaluate(&model, &store, &examples, BankSpan::All, cfg.seed)?;
            std::fs::write(&out, heatmap_csv(&stats.bank_sizes))?;
            println!("wrote heatmap for {} stories to {}", examples.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
