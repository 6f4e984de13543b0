//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers, layered over task defaults, a size preset and the variant.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use larl::eval::{EvalConfig, PplForm, TaskKind};
use larl::latent::LatentKind;
use larl::model::{EncoderKind, Fusion, ModelConfig, Objective};
use larl::nn::CellKind;
use larl::training::{BaselinePlacement, RlRun, RlSlSchedule, StepKind, TrainConfig, WordReturns};

/// Model variants: name, latent kind, objective, fusion.
pub const VARIANTS: [(&str, Option<LatentKind>, Objective, Fusion); 7] = [
    (
        "gauss",
        Some(LatentKind::Gaussian),
        Objective::FullElbo,
        Fusion::None,
    ),
    (
        "cat",
        Some(LatentKind::Categorical),
        Objective::FullElbo,
        Fusion::Summation,
    ),
    (
        "attncat",
        Some(LatentKind::Categorical),
        Objective::FullElbo,
        Fusion::Attention,
    ),
    (
        "lite-gauss",
        Some(LatentKind::Gaussian),
        Objective::LiteElbo,
        Fusion::None,
    ),
    (
        "lite-cat",
        Some(LatentKind::Categorical),
        Objective::LiteElbo,
        Fusion::Summation,
    ),
    (
        "lite-attncat",
        Some(LatentKind::Categorical),
        Objective::LiteElbo,
        Fusion::Attention,
    ),
    ("baseline-word", None, Objective::Mle, Fusion::None),
];

pub fn resolve_variant(name: &str) -> Result<(Option<LatentKind>, Objective, Fusion)> {
    VARIANTS
        .iter()
        .find(|v| v.0 == name)
        .map(|v| (v.1, v.2, v.3))
        .ok_or_else(|| {
            let names: Vec<&str> = VARIANTS.iter().map(|v| v.0).collect();
            anyhow!(
                "unknown variant '{name}'; valid variants: {}",
                names.join(", ")
            )
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Published model sizes.
    Full,
    /// Small sizes that train on one CPU core in minutes.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub kb_seed: u64,
    /// Test scenarios (negotiation) or dialogs (slot-filling) rolled out
    /// by `eval` and at every RL checkpoint; 0 uses the whole test split.
    pub eval_episodes: usize,
    /// Test dialogs scored for perplexity; 0 uses the whole test split.
    pub eval_ppl_dialogs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpponentChoice {
    Scripted,
    /// A frozen word-level model loaded from this checkpoint.
    Model(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    pub variant: String,
    pub preset: Preset,
    pub precision: Precision,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rl: RlRun,
    pub opponent: OpponentChoice,
    pub eval: EvalConfig,
}

/// Ordered `section.key = value` entries; later entries win.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Entries(pub Vec<(String, String)>);

impl Entries {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut section = String::new();
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("{origin}:{}: unterminated section header", n + 1))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", n + 1))?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            out.push((key, v.trim().to_string()));
        }
        Ok(Self(out))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.0.push((key.to_string(), value.into()));
    }

    /// `key=value` command-line override.
    pub fn push_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override '{kv}' is not key=value"))?;
        self.push(k.trim(), v.trim());
        Ok(())
    }

    fn last(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("{key}: cannot parse '{v}'"))
}

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    match v {
        "none" | "off" => Ok(None),
        _ => num(key, v).map(Some),
    }
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(n, _)| *n == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            anyhow!("{key}: '{v}' is not one of {}", names.join(", "))
        })
}

impl RunConfig {
    /// Task defaults, then the preset, then the variant, then every entry.
    pub fn resolve(entries: &Entries) -> Result<Self> {
        let task = choice(
            "run.task",
            entries.last("run.task").unwrap_or("negotiation"),
            &[
                ("negotiation", TaskKind::Negotiation),
                ("slotfill", TaskKind::Slotfill),
            ],
        )?;
        let variant = entries
            .last("run.variant")
            .unwrap_or("lite-cat")
            .to_string();
        let preset = choice(
            "run.preset",
            entries.last("run.preset").unwrap_or("desk"),
            &[("full", Preset::Full), ("desk", Preset::Desk)],
        )?;
        let (latent, objective, fusion) = resolve_variant(&variant)?;
        let (mut model, mut train) = match task {
            TaskKind::Negotiation => (
                ModelConfig::negotiation(0, latent, fusion, objective),
                TrainConfig::negotiation(),
            ),
            TaskKind::Slotfill => (
                ModelConfig::slotfill(0, latent, fusion, objective),
                TrainConfig::slotfill(),
            ),
        };
        let mut data = DataConfig {
            train: 2000,
            valid: 200,
            test: 200,
            kb_seed: 0,
            eval_episodes: 0,
            eval_ppl_dialogs: 0,
        };
        let mut rl = RlRun::default();
        let mut eval = EvalConfig::default();
        if preset == Preset::Desk {
            desk(&mut model, &mut train, &mut rl, &mut eval, &mut data);
        }
        let mut cfg = Self {
            task,
            variant,
            preset,
            precision: Precision::F32,
            seed: 0,
            data,
            model,
            train,
            rl,
            opponent: OpponentChoice::Scripted,
            eval,
        };
        for (k, v) in &entries.0 {
            cfg.set(k, v)?;
        }
        cfg.eval.seed = cfg.seed;
        cfg.train.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "run.task" | "run.variant" | "run.preset" => {}
            "run.seed" => self.seed = num(key, v)?,
            "run.precision" => {
                self.precision =
                    choice(key, v, &[("f32", Precision::F32), ("f64", Precision::F64)])?
            }
            "data.train" => self.data.train = num(key, v)?,
            "data.valid" => self.data.valid = num(key, v)?,
            "data.test" => self.data.test = num(key, v)?,
            "data.kb_seed" => self.data.kb_seed = num(key, v)?,
            "data.eval_episodes" => self.data.eval_episodes = num(key, v)?,
            "data.eval_ppl_dialogs" => self.data.eval_ppl_dialogs = num(key, v)?,
            "model.embed_size" => m.embed_size = num(key, v)?,
            "model.utt_size" => m.utt_size = num(key, v)?,
            "model.ctx_size" => m.ctx_size = num(key, v)?,
            "model.dec_size" => m.dec_size = num(key, v)?,
            "model.m" => m.m = num(key, v)?,
            "model.k" => m.k = num(key, v)?,
            "model.d" => m.d = num(key, v)?,
            "model.beta" => m.beta = num(key, v)?,
            "model.dropout" => m.dropout = num(key, v)?,
            "model.init_range" => m.init_range = num(key, v)?,
            "model.max_context_turns" => m.max_context_turns = num(key, v)?,
            "model.max_context_tokens" => m.max_context_tokens = num(key, v)?,
            "model.decoder_cell" => {
                m.decoder_cell =
                    choice(key, v, &[("gru", CellKind::Gru), ("lstm", CellKind::Lstm)])?
            }
            "model.encoder" => {
                m.encoder = choice(
                    key,
                    v,
                    &[
                        ("hierarchical", EncoderKind::Hierarchical),
                        ("flat", EncoderKind::Flat),
                    ],
                )?
            }
            "train.sl_lr" => t.sl_lr = num(key, v)?,
            "train.sl_clip" => t.sl_clip = opt_f64(key, v)?,
            "train.rl_lr" => t.rl_lr = num(key, v)?,
            "train.rl_clip" => t.rl_clip = opt_f64(key, v)?,
            "train.gamma" => t.gamma = num(key, v)?,
            "train.rl_sl" => t.rl_sl = v.parse().map_err(|e| anyhow!("{key}: {e}"))?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.ppl_samples" => t.ppl_samples = num(key, v)?,
            "train.elbo_samples" => t.elbo_samples = num(key, v)?,
            "train.gumbel_tau" => t.gumbel_tau = num(key, v)?,
            "train.baseline_decay" => t.baseline_decay = num(key, v)?,
            "train.baseline_placement" => {
                t.baseline_placement = choice(
                    key,
                    v,
                    &[
                        ("terminal", BaselinePlacement::Terminal),
                        ("every_step", BaselinePlacement::EveryStep),
                    ],
                )?
            }
            "train.word_returns" => {
                t.word_returns = choice(
                    key,
                    v,
                    &[
                        ("per_token", WordReturns::PerToken),
                        ("per_turn", WordReturns::PerTurn),
                    ],
                )?
            }
            "rl.episodes" => self.rl.episodes = num(key, v)?,
            "rl.episodes_per_update" => self.rl.episodes_per_update = num(key, v)?,
            "rl.eval_every" => self.rl.eval_every = num(key, v)?,
            "rl.max_len" => self.rl.max_len = num(key, v)?,
            "rl.max_turns" => self.rl.max_turns = num(key, v)?,
            "rl.opponent" => {
                self.opponent = match v {
                    "scripted" => OpponentChoice::Scripted,
                    path => OpponentChoice::Model(PathBuf::from(path)),
                }
            }
            "eval.ppl_samples" => self.eval.ppl_samples = num(key, v)?,
            "eval.max_len" => self.eval.max_len = num(key, v)?,
            "eval.max_turns" => self.eval.max_turns = num(key, v)?,
            "eval.ppl_form" => {
                self.eval.ppl_form = choice(
                    key,
                    v,
                    &[
                        ("marginal", PplForm::Marginal),
                        ("policy_weighted", PplForm::PolicyWeighted),
                    ],
                )?
            }
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    /// Model hyperparameters as one line, for echoing.
    pub fn describe_model(&self) -> String {
        let m = &self.model;
        let latent = match m.latent {
            None => "word-level".to_string(),
            Some(LatentKind::Gaussian) => format!("gaussian M={}", m.m),
            Some(LatentKind::Categorical) => format!("categorical M={}, K={}", m.m, m.k),
        };
        format!(
            "variant={} {latent} objective={:?} fusion={:?} beta={} embed={} utt={} ctx={} dec={} d={}",
            self.variant, m.objective, m.fusion, m.beta, m.embed_size, m.utt_size, m.ctx_size, m.dec_size, m.d
        )
    }
}

/// Desk-scale sizes; latent shapes and optimizer settings keep their
/// published values.
fn desk(
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    rl: &mut RlRun,
    eval: &mut EvalConfig,
    data: &mut DataConfig,
) {
    model.embed_size = 32;
    model.utt_size = 32;
    model.ctx_size = 64;
    model.dec_size = 64;
    model.d = 64;
    model.max_context_turns = 6;
    model.max_context_tokens = 60;
    train.epochs = 4;
    train.batch_size = 32;
    rl.episodes = 2000;
    rl.eval_every = 200;
    eval.ppl_samples = 5;
    data.eval_episodes = 100;
    data.eval_ppl_dialogs = 60;
}

/// First `n` update kinds of `s` as `R`/`S` letters, comma-separated.
pub fn schedule_pattern(s: &RlSlSchedule, n: usize) -> String {
    s.iter()
        .take(n)
        .map(|k| if k == StepKind::Rl { "R" } else { "S" })
        .collect::<Vec<_>>()
        .join(",")
}

/// Fields whose values differ between two configurations, for error
/// messages.
pub fn differing_fields<A: Serialize>(a: &A, b: &A) -> Vec<String> {
    let (Ok(serde_json::Value::Object(x)), Ok(serde_json::Value::Object(y))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return Vec::new();
    };
    let mut keys: BTreeMap<&String, ()> = BTreeMap::new();
    keys.extend(x.keys().map(|k| (k, ())));
    keys.extend(y.keys().map(|k| (k, ())));
    keys.into_keys()
        .filter(|k| x.get(*k) != y.get(*k))
        .map(|k| {
            let show = |v: Option<&serde_json::Value>| v.map_or("-".to_string(), |v| v.to_string());
            format!("{k} ({} vs {})", show(x.get(k)), show(y.get(k)))
        })
        .collect()
}
