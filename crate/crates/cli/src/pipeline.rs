//! The experiment stages. Every stage reads and writes files under one run
//! directory and records them in the run manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use larl::corpus::slotfill::{default_kb, KbEntity};
use larl::corpus::{
    build_vocab, gen_negotiation_splits, gen_slotfill_splits, read_dialogs, read_jsonl,
    unique_scenarios, write_jsonl, Dialog, EncodedSample, Goal, Scenario, Vocabulary,
};
use larl::env::OpponentKind;
use larl::error::LarlError;
use larl::eval::{
    evaluate_negotiation, evaluate_slotfill, lcr_curve, log_spaced_budgets, write_lcr_csv,
    CheckpointMetric, EvalReport, LcrPoint, TaskKind,
};
use larl::model::{Checkpoint, DialogModel, ModelConfig};
use larl::rng::SeedTree;
use larl::training::{self, PretrainReport, Reinforce, RlSummary, RlTask, TrainLog};
use larl_tensor::Scalar;

use crate::config::{differing_fields, Entries, OpponentChoice, RunConfig};
use crate::manifest::{unix_ms, CommandRecord, Environment, RunManifest};

pub const TRAIN: &str = "data/train.jsonl";
pub const VALID: &str = "data/valid.jsonl";
pub const TEST: &str = "data/test.jsonl";
pub const VOCAB: &str = "data/vocab.txt";
pub const KB: &str = "data/kb.json";
pub const PRETRAINED: &str = "pretrain.ckpt";
pub const PRETRAIN_LOG: &str = "logs/pretrain.jsonl";
pub const RL_LOG: &str = "logs/rl.jsonl";
pub const RL_FINAL: &str = "rl/final.ckpt";
pub const METRICS: &str = "rl/metrics.jsonl";
pub const REPORT: &str = "eval/report.json";
pub const EPISODES: &str = "eval/episodes.jsonl";
pub const LCR_CSV: &str = "lcr.csv";

/// Corpora and lookup tables of a run.
pub struct Data {
    pub train: Vec<Dialog>,
    pub valid: Vec<Dialog>,
    pub test: Vec<Dialog>,
    pub vocab: Vocabulary,
    pub kb: Vec<KbEntity>,
}

impl Data {
    pub fn encoded(dialogs: &[Dialog], vocab: &Vocabulary) -> Vec<EncodedSample> {
        dialogs
            .iter()
            .flat_map(Dialog::samples)
            .map(|s| s.encode(vocab))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub dialogs: [usize; 3],
    pub vocab: usize,
    pub train_samples: usize,
}

/// A configured run rooted at a directory.
pub struct Run {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub settings: Entries,
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, cfg: RunConfig) -> Self {
        Self {
            root: root.into(),
            cfg,
            settings: Entries::default(),
        }
    }

    /// Resolves `settings` on top of those already recorded in the run's
    /// manifest, so later commands need not repeat them.
    pub fn resume(root: impl Into<PathBuf>, settings: &Entries) -> Result<Self> {
        let root = root.into();
        let mut all = RunManifest::load_or_default(&root)?.settings;
        all.0.extend(settings.0.iter().cloned());
        let cfg = RunConfig::resolve(&all)?;
        Ok(Self {
            root,
            cfg,
            settings: all,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn create(&self, rel: &str) -> Result<BufWriter<File>> {
        let p = self.path(rel);
        ensure_parent(&p)?;
        Ok(BufWriter::new(
            File::create(&p).with_context(|| format!("creating {}", p.display()))?,
        ))
    }

    fn open(&self, rel: &str) -> Result<BufReader<File>> {
        let p = self.path(rel);
        Ok(BufReader::new(File::open(&p).with_context(|| {
            format!("opening {} (run gen-data first?)", p.display())
        })?))
    }

    /// Runs `body` as `command`, recording timestamps and the config echo.
    fn record<R>(
        &self,
        command: &str,
        body: impl FnOnce(&mut RunManifest) -> Result<R>,
    ) -> Result<R> {
        std::fs::create_dir_all(&self.root)
            .with_context(|| format!("creating {}", self.root.display()))?;
        let mut manifest = RunManifest::load_or_default(&self.root)?;
        manifest.settings = self.settings.clone();
        manifest.config = Some(serde_json::to_value(&self.cfg)?);
        manifest.environment = Some(Environment::current());
        let started = unix_ms();
        let out = body(&mut manifest)?;
        manifest.commands.push(CommandRecord {
            command: command.to_string(),
            started_unix_ms: started,
            ended_unix_ms: unix_ms(),
        });
        manifest.save(&self.root)?;
        Ok(out)
    }

    pub fn gen_data(&self) -> Result<DataSummary> {
        self.record("gen-data", |man| {
            let d = &self.cfg.data;
            let sizes = [d.train, d.valid, d.test];
            let seed = SeedTree::new(self.cfg.seed).seed(larl::rng::DATA);
            let kb = default_kb(d.kb_seed);
            let splits = match self.cfg.task {
                TaskKind::Negotiation => gen_negotiation_splits(sizes, seed)?,
                TaskKind::Slotfill => gen_slotfill_splits(sizes, &kb, seed)?,
            };
            let vocab = build_vocab(&splits.train);
            for (rel, dialogs) in [
                (TRAIN, &splits.train),
                (VALID, &splits.valid),
                (TEST, &splits.test),
            ] {
                let mut w = self.create(rel)?;
                write_jsonl(&mut w, dialogs)?;
                w.flush()?;
                man.artifact(&self.root, rel, "gen-data")?;
            }
            let mut w = self.create(VOCAB)?;
            vocab.write(&mut w)?;
            w.flush()?;
            man.artifact(&self.root, VOCAB, "gen-data")?;
            if self.cfg.task == TaskKind::Slotfill {
                let mut w = self.create(KB)?;
                serde_json::to_writer_pretty(&mut w, &kb)?;
                w.flush()?;
                man.artifact(&self.root, KB, "gen-data")?;
            }
            Ok(DataSummary {
                dialogs: [splits.train.len(), splits.valid.len(), splits.test.len()],
                vocab: vocab.len(),
                train_samples: splits.train.iter().map(|d| d.samples().len()).sum(),
            })
        })
    }

    pub fn load_data(&self) -> Result<Data> {
        let kb = if self.cfg.task == TaskKind::Slotfill {
            serde_json::from_reader(self.open(KB)?).context("parsing knowledge base")?
        } else {
            Vec::new()
        };
        Ok(Data {
            train: read_dialogs(self.open(TRAIN)?)?,
            valid: read_dialogs(self.open(VALID)?)?,
            test: read_dialogs(self.open(TEST)?)?,
            vocab: Vocabulary::read(self.open(VOCAB)?)?,
            kb,
        })
    }

    /// The configured model shape for this run's vocabulary.
    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            ..self.cfg.model.clone()
        }
    }

    /// Loads a checkpoint and checks it against the configuration.
    pub fn load_checkpoint<T: Scalar>(
        &self,
        path: &Path,
        vocab: &Vocabulary,
    ) -> Result<Checkpoint<T>> {
        let ck =
            Checkpoint::<T>::load(path).with_context(|| format!("loading {}", path.display()))?;
        let expected = self.model_config(vocab);
        let diff = differing_fields(&expected, &ck.model.config);
        if !diff.is_empty() {
            bail!(
                "checkpoint {} does not match the configuration: {}",
                path.display(),
                diff.join(", ")
            );
        }
        Ok(ck)
    }

    pub fn pretrain<T: Scalar>(&self) -> Result<PretrainReport> {
        self.record("pretrain", |man| {
            let data = self.load_data()?;
            let tree = SeedTree::new(self.cfg.seed);
            let config = self.model_config(&data.vocab);
            let mut model = DialogModel::<T>::new(config, tree.seed(larl::rng::INIT))?;
            let train = Data::encoded(&data.train, &data.vocab);
            let valid = Data::encoded(&data.valid, &data.vocab);
            let log_path = self.path(PRETRAIN_LOG);
            ensure_parent(&log_path)?;
            let _ = std::fs::remove_file(&log_path);
            let mut log = TrainLog::append(&log_path)?;
            let mut rng = tree.stream("pretrain");
            let report = training::pretrain(
                &mut model,
                &train,
                &valid,
                &self.cfg.train,
                &mut rng,
                &mut log,
            )?;
            drop(log);
            man.artifact(&self.root, PRETRAIN_LOG, "pretrain")?;
            let mut ck = Checkpoint::new(model);
            ck.counters.insert("epochs".into(), report.epochs as u64);
            ck.counters.insert("steps".into(), report.steps);
            ck.save(self.path(PRETRAINED))?;
            man.checkpoint(&self.root, PRETRAINED, "pretrain")?;
            Ok(report)
        })
    }

    fn opponent<T: Scalar>(&self, vocab: &Vocabulary) -> Result<OpponentKind<T>> {
        Ok(match &self.cfg.opponent {
            OpponentChoice::Scripted => OpponentKind::Scripted,
            OpponentChoice::Model(path) => {
                let ck = Checkpoint::<T>::load(path)
                    .with_context(|| format!("loading opponent {}", path.display()))?;
                if ck.model.config.vocab_size != vocab.len() {
                    bail!(
                        "opponent checkpoint {} has a different vocabulary",
                        path.display()
                    );
                }
                OpponentKind::Model {
                    model: Arc::new(ck.model),
                    vocab: Arc::new(vocab.clone()),
                    max_len: self.cfg.eval.max_len,
                }
            }
        })
    }

    fn eval_subsets<'a>(&self, data: &'a Data) -> (&'a [Dialog], Vec<Scenario>, &'a [Dialog]) {
        let take = |n: usize, len: usize| if n == 0 { len } else { n.min(len) };
        let ppl = &data.test[..take(self.cfg.data.eval_ppl_dialogs, data.test.len())];
        let dialogs = &data.test[..take(self.cfg.data.eval_episodes, data.test.len())];
        // One game per test dialog; a repeated scenario gets its own game seed.
        let scenarios = dialogs
            .iter()
            .filter_map(|d| match &d.goal {
                Goal::Negotiation { scenario } => Some(scenario.clone()),
                _ => None,
            })
            .collect();
        (ppl, scenarios, dialogs)
    }

    /// Test-set report for a model, plus the rollouts it was computed from.
    pub fn evaluate<T: Scalar>(
        &self,
        model: &DialogModel<T>,
        data: &Data,
        opponent: &OpponentKind<T>,
    ) -> Result<(EvalReport, Vec<serde_json::Value>)> {
        let (ppl_dialogs, scenarios, dialogs) = self.eval_subsets(data);
        Ok(match self.cfg.task {
            TaskKind::Negotiation => {
                let (mut r, trs) = evaluate_negotiation(
                    model,
                    &data.vocab,
                    ppl_dialogs,
                    &scenarios,
                    opponent,
                    &self.cfg.eval,
                )?;
                r.ppl = finite(r.ppl);
                (
                    r,
                    trs.iter()
                        .map(serde_json::to_value)
                        .collect::<Result<_, _>>()?,
                )
            }
            TaskKind::Slotfill => {
                let (mut r, res) = evaluate_slotfill(
                    model,
                    &data.vocab,
                    ppl_dialogs,
                    dialogs,
                    &data.kb,
                    &self.cfg.eval,
                )?;
                r.ppl = finite(r.ppl);
                (
                    r,
                    res.iter()
                        .map(serde_json::to_value)
                        .collect::<Result<_, _>>()?,
                )
            }
        })
    }

    /// Policy-gradient fine-tuning from `from`, evaluating on the test set
    /// every `eval_every` episodes.
    pub fn rl_train<T: Scalar>(&self, from: &Path) -> Result<(RlSummary, Vec<CheckpointMetric>)> {
        self.record("rl-train", |man| {
            let data = self.load_data()?;
            let mut model = self.load_checkpoint::<T>(from, &data.vocab)?.model;
            let opponent = self.opponent::<T>(&data.vocab)?;
            let scenarios = unique_scenarios(&data.train);
            let task = match self.cfg.task {
                TaskKind::Negotiation => RlTask::Negotiation {
                    scenarios: &scenarios,
                    opponent: &opponent,
                },
                TaskKind::Slotfill => RlTask::Slotfill {
                    dialogs: &data.train,
                    kb: &data.kb,
                },
            };
            let sl = if matches!(self.cfg.train.rl_sl, training::RlSlSchedule::Off) {
                Vec::new()
            } else {
                Data::encoded(&data.train, &data.vocab)
            };
            let mut trainer = Reinforce::<T>::new(self.cfg.train.clone())?;
            let log_path = self.path(RL_LOG);
            ensure_parent(&log_path)?;
            let _ = std::fs::remove_file(&log_path);
            let mut log = TrainLog::append(&log_path)?;
            let mut rng = SeedTree::new(self.cfg.seed).stream("rl");
            let mut metrics = Vec::new();
            let mut saved = Vec::new();
            let summary = training::rl_train(
                &mut model,
                &data.vocab,
                &task,
                &sl,
                &mut trainer,
                &self.cfg.rl,
                &mut rng,
                &mut log,
                |m, episodes| {
                    let eval_err = |e: anyhow::Error| LarlError::Env(format!("evaluation: {e:#}"));
                    let (r, _) = self.evaluate(m, &data, &opponent).map_err(eval_err)?;
                    metrics.push(CheckpointMetric {
                        index: metrics.len(),
                        ppl: r.ppl,
                        reward: r.reward_mean,
                        step: episodes as u64,
                    });
                    let rel = format!("rl/ckpt-{episodes:06}.ckpt");
                    let p = self.path(&rel);
                    ensure_parent(&p).map_err(eval_err)?;
                    Checkpoint::new(m.clone()).save(&p)?;
                    saved.push(rel);
                    Ok(())
                },
            )?;
            drop(log);
            for rel in &saved {
                man.checkpoint(&self.root, rel, "rl-train")?;
            }
            let mut w = self.create(METRICS)?;
            write_jsonl(&mut w, &metrics)?;
            w.flush()?;
            man.artifact(&self.root, METRICS, "rl-train")?;
            man.artifact(&self.root, RL_LOG, "rl-train")?;
            let mut ck = Checkpoint::new(model);
            ck.optimizer = Some(trainer.rl_optimizer.clone());
            ck.rng = Some(rng);
            ck.counters
                .insert("episodes".into(), summary.episodes as u64);
            ck.counters
                .insert("rl_updates".into(), summary.rl_updates as u64);
            ck.counters
                .insert("sl_updates".into(), summary.sl_updates as u64);
            ck.save(self.path(RL_FINAL))?;
            man.checkpoint(&self.root, RL_FINAL, "rl-train")?;
            Ok((summary, metrics))
        })
    }

    pub fn eval<T: Scalar>(&self, checkpoint: &Path) -> Result<EvalReport> {
        self.record("eval", |man| {
            let data = self.load_data()?;
            let model = self.load_checkpoint::<T>(checkpoint, &data.vocab)?.model;
            let opponent = self.opponent::<T>(&data.vocab)?;
            let (report, episodes) = self.evaluate(&model, &data, &opponent)?;
            let mut w = self.create(REPORT)?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            w.flush()?;
            man.artifact(&self.root, REPORT, "eval")?;
            let mut w = self.create(EPISODES)?;
            write_jsonl(&mut w, &episodes)?;
            w.flush()?;
            man.artifact(&self.root, EPISODES, "eval")?;
            Ok(report)
        })
    }
}

/// Perplexities beyond f64 range are reported as the largest finite value.
fn finite(p: f64) -> f64 {
    if p.is_finite() {
        p
    } else {
        f64::MAX
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<CheckpointMetric>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

/// Where to evaluate an LCR curve.
#[derive(Clone, Debug, PartialEq)]
pub enum Budgets {
    /// That many log-spaced values over the observed PPL range.
    LogSpaced(usize),
    At(Vec<f64>),
}

/// LCR curve at `budgets`, written as CSV.
pub fn lcr(metrics: &[CheckpointMetric], budgets: &Budgets, out: &Path) -> Result<Vec<LcrPoint>> {
    let xs = match budgets {
        Budgets::LogSpaced(n) => log_spaced_budgets(metrics, *n)?,
        Budgets::At(xs) => xs.clone(),
    };
    let points = lcr_curve(metrics, &xs)?;
    ensure_parent(out)?;
    let mut w =
        BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_lcr_csv(&mut w, &points)?;
    w.flush()?;
    Ok(points)
}

/// First argument of a pretrain/rl/eval command when none is given.
pub fn default_checkpoint(run: &Run, command: &str) -> Result<PathBuf> {
    let rel = match command {
        "rl-train" => PRETRAINED,
        "eval" | "chat" => {
            if run.path(RL_FINAL).exists() {
                RL_FINAL
            } else {
                PRETRAINED
            }
        }
        other => return Err(anyhow!("no default checkpoint for {other}")),
    };
    Ok(run.path(rel))
}
