use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::IndexedRandom;

use larl::corpus::unique_scenarios;
use larl_cli::chat::{chat, parse_scenario};
use larl_cli::pipeline::{self, default_checkpoint, Budgets, Run};
use larl_cli::{lcr, read_metrics, schedule_pattern, Entries, Precision};
use larl_tensor::Scalar;

#[derive(Parser)]
#[command(
    name = "larl",
    about = "Latent-action dialog agents: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines under `[section]` headers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    /// negotiation or slotfill.
    #[arg(long)]
    task: Option<String>,
    /// desk or full.
    #[arg(long)]
    preset: Option<String>,
    /// Any config key, e.g. `--set train.epochs=3`; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration.
    Config(Common),
    /// Generate the synthetic train/valid/test corpora and vocabulary.
    GenData(Common),
    /// Supervised pre-training with the variant's objective.
    Pretrain(Common),
    /// Policy-gradient fine-tuning with periodic test evaluation.
    RlTrain {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; defaults to the run's pre-trained model.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Language-constrained reward curve from RL checkpoint metrics.
    Lcr {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "lcr.csv")]
        csv: PathBuf,
        /// Number of log-spaced budgets over the observed PPL range.
        #[arg(long, default_value_t = larl::eval::DEFAULT_BUDGETS)]
        budgets: usize,
        /// Explicit comma-separated budgets; overrides --budgets.
        #[arg(long, value_delimiter = ',')]
        at: Option<Vec<f64>>,
    },
    /// Negotiate against a checkpoint in the terminal.
    Chat {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `counts=1,1,3 agent=1,6,1 you=1,6,1`; defaults to a test scenario.
        #[arg(long)]
        scenario: Option<String>,
    },
}

fn resolve(c: &Common) -> Result<Run> {
    let mut e = match &c.config {
        Some(p) => Entries::read(p)?,
        None => Entries::default(),
    };
    for (key, v) in [
        ("run.seed", c.seed.map(|s| s.to_string())),
        ("run.variant", c.variant.clone()),
        ("run.task", c.task.clone()),
        ("run.preset", c.preset.clone()),
    ] {
        if let Some(v) = v {
            e.push(key, v);
        }
    }
    for kv in &c.set {
        e.push_assignment(kv)?;
    }
    Run::resume(&c.out, &e)
}

fn pretrain<T: Scalar>(run: &Run) -> Result<()> {
    println!("{}", run.cfg.describe_model());
    let r = run.pretrain::<T>()?;
    println!(
        "pretrained {} epochs ({} steps); best epoch {} valid loss {:.4} ppl {:.3}",
        r.epochs, r.steps, r.best_epoch, r.best_valid.total, r.best_valid.ppl
    );
    println!("checkpoint {}", run.path(pipeline::PRETRAINED).display());
    Ok(())
}

fn rl_train<T: Scalar>(run: &Run, from: Option<PathBuf>) -> Result<()> {
    let from = match from {
        Some(p) => p,
        None => default_checkpoint(run, "rl-train")?,
    };
    println!("{}", run.cfg.describe_model());
    let s = &run.cfg.train.rl_sl;
    println!("schedule {s} ({}, ...)", schedule_pattern(s, 5));
    let (s, metrics) = run.rl_train::<T>(&from)?;
    for m in &metrics {
        println!(
            "episodes {:>6}  test ppl {:.3}  test reward {:.3}",
            m.step, m.ppl, m.reward
        );
    }
    println!(
        "{} episodes, {} rl updates, {} sl updates, mean training reward {:.3}",
        s.episodes, s.rl_updates, s.sl_updates, s.mean_reward
    );
    Ok(())
}

fn eval<T: Scalar>(run: &Run, ckpt: Option<PathBuf>) -> Result<()> {
    let ckpt = match ckpt {
        Some(p) => p,
        None => default_checkpoint(run, "eval")?,
    };
    let r = run.eval::<T>(&ckpt)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn chat_cmd<T: Scalar>(run: &Run, ckpt: Option<PathBuf>, scenario: Option<String>) -> Result<()> {
    let data = run.load_data()?;
    let ckpt = match ckpt {
        Some(p) => p,
        None => default_checkpoint(run, "chat")?,
    };
    let model = run.load_checkpoint::<T>(&ckpt, &data.vocab)?.model;
    let scenario = match scenario {
        Some(s) => parse_scenario(&s)?,
        None => {
            let mut rng = larl::rng::SeedTree::new(run.cfg.seed).stream("chat");
            unique_scenarios(&data.test)
                .choose(&mut rng)
                .cloned()
                .context("no test scenarios")?
        }
    };
    let stdin = BufReader::new(std::io::stdin());
    chat(
        &model,
        &data.vocab,
        scenario,
        run.cfg.seed,
        run.cfg.eval.max_len,
        run.cfg.eval.max_turns,
        stdin,
        std::io::stdout(),
    )?;
    Ok(())
}

macro_rules! by_precision {
    ($run:expr, $f:ident ( $($arg:expr),* )) => {
        match $run.cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn main_inner() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Config(c) => {
            let run = resolve(&c)?;
            println!("{}", serde_json::to_string_pretty(&run.cfg)?);
        }
        Command::GenData(c) => {
            let run = resolve(&c)?;
            let s = run.gen_data()?;
            println!(
                "wrote {} / {} / {} dialogs ({} training samples), vocabulary {} to {}",
                s.dialogs[0],
                s.dialogs[1],
                s.dialogs[2],
                s.train_samples,
                s.vocab,
                run.root.display()
            );
        }
        Command::Pretrain(c) => {
            let run = resolve(&c)?;
            by_precision!(run, pretrain(&run))?;
        }
        Command::RlTrain { common, from } => {
            let run = resolve(&common)?;
            by_precision!(run, rl_train(&run, from))?;
        }
        Command::Eval { common, checkpoint } => {
            let run = resolve(&common)?;
            by_precision!(run, eval(&run, checkpoint))?;
        }
        Command::Lcr {
            metrics,
            csv,
            budgets,
            at,
        } => {
            let m = read_metrics(&metrics)?;
            let budgets = match at {
                Some(xs) => Budgets::At(xs),
                None => Budgets::LogSpaced(budgets),
            };
            let pts = lcr(&m, &budgets, &csv)?;
            let mut out = std::io::stdout().lock();
            for p in pts {
                match p.best_reward {
                    Some(r) => writeln!(out, "{:.4},{r}", p.budget)?,
                    None => writeln!(out, "{:.4},", p.budget)?,
                }
            }
        }
        Command::Chat {
            common,
            checkpoint,
            scenario,
        } => {
            let run = resolve(&common)?;
            by_precision!(run, chat_cmd(&run, checkpoint, scenario))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e
                .chain()
                .map(|c| c.to_string().replace('\n', " "))
                .collect();
            eprintln!("error: {}", msg.join(": "));
            ExitCode::FAILURE
        }
    }
}
