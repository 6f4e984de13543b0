//! The policy-gradient loop: collect episodes, update, and interleave
//! supervised steps per the RL:SL schedule.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use larl_tensor::Scalar;

use crate::corpus::negotiation::Scenario;
use crate::corpus::slotfill::KbEntity;
use crate::corpus::{Dialog, EncodedSample, Vocabulary, MAX_TURNS};
use crate::env::negotiation::{negotiation_episode, NegotiationEnv, OpponentKind};
use crate::env::slotfill::bandit_episode;
use crate::env::ActConfig;
use crate::error::{LarlError, Result};
use crate::model::DialogModel;
use crate::rng::Rng;
use crate::training::{Episode, LogRecord, Reinforce, StepKind, TrainLog};

/// Where episodes come from.
pub enum RlTask<'a, T> {
    Negotiation {
        scenarios: &'a [Scenario],
        opponent: &'a OpponentKind<T>,
    },
    Slotfill {
        dialogs: &'a [Dialog],
        kb: &'a [KbEntity],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlRun {
    /// Policy-gradient episodes in total.
    pub episodes: usize,
    pub episodes_per_update: usize,
    /// Evaluation cadence in episodes; also the LCR sampling grid.
    pub eval_every: usize,
    pub max_len: usize,
    pub max_turns: usize,
}

impl Default for RlRun {
    fn default() -> Self {
        Self {
            episodes: 2000,
            episodes_per_update: 1,
            eval_every: 200,
            max_len: 20,
            max_turns: MAX_TURNS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlSummary {
    pub rl_updates: usize,
    pub sl_updates: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    pub agreements: usize,
}

/// Rolls out one episode with the current (eval-mode) model. Returns the
/// episode and, for negotiation, whether the game ended in agreement.
pub fn collect_episode<T: Scalar>(
    model: &DialogModel<T>,
    vocab: &Vocabulary,
    task: &RlTask<'_, T>,
    run: &RlRun,
    rng: &mut Rng,
) -> Result<(Episode, bool)> {
    let act = ActConfig {
        stochastic: true,
        max_len: run.max_len,
    };
    match task {
        RlTask::Negotiation { scenarios, opponent } => {
            let sc = scenarios.choose(rng).ok_or_else(|| LarlError::Input("no training scenarios".into()))?;
            let mut env = NegotiationEnv::reset(sc.clone(), opponent, rng.random(), run.max_turns)?;
            let (ep, tr) = negotiation_episode(model, vocab, &mut env, act, rng)?;
            Ok((ep, tr.outcome.agreement))
        }
        RlTask::Slotfill { dialogs, kb } => {
            let d = dialogs.choose(rng).ok_or_else(|| LarlError::Input("no training dialogs".into()))?;
            let (ep, res) = bandit_episode(model, vocab, d, kb, act, rng)?;
            Ok((ep, res.success))
        }
    }
}

/// Runs `run.episodes` episodes of policy gradient. `on_eval` sees the
/// model before training and after every `eval_every` episodes.
#[allow(clippy::too_many_arguments)]
pub fn rl_train<T: Scalar>(
    model: &mut DialogModel<T>,
    vocab: &Vocabulary,
    task: &RlTask<'_, T>,
    sl_data: &[EncodedSample],
    trainer: &mut Reinforce<T>,
    run: &RlRun,
    rng: &mut Rng,
    log: &mut TrainLog,
    mut on_eval: impl FnMut(&DialogModel<T>, usize) -> Result<()>,
) -> Result<RlSummary> {
    if run.episodes_per_update == 0 || run.eval_every == 0 {
        return Err(LarlError::Config("episodes_per_update and eval_every must be positive".into()));
    }
    let schedule = trainer.config.rl_sl;
    if !matches!(schedule, super::RlSlSchedule::Off) && sl_data.is_empty() {
        return Err(LarlError::Config("an RL:SL schedule needs supervised data".into()));
    }
    let mut summary = RlSummary::default();
    let mut reward_sum = 0.0;
    let mut next_eval = 0;
    on_eval(model, 0)?;
    next_eval += run.eval_every;
    let mut step = 0usize;
    while summary.episodes < run.episodes {
        match schedule.kind_at(step) {
            StepKind::Rl => {
                let n = run.episodes_per_update.min(run.episodes - summary.episodes);
                let mut batch = Vec::with_capacity(n);
                let mut agreed = 0;
                for _ in 0..n {
                    let (ep, ok) = collect_episode(model, vocab, task, run, rng)?;
                    agreed += usize::from(ok);
                    if !ep.is_empty() {
                        batch.push(ep);
                    }
                }
                summary.episodes += n;
                summary.agreements += agreed;
                if !batch.is_empty() {
                    let r = match model.config.latent {
                        Some(_) => trainer.latent_step(model, &batch)?,
                        None => trainer.word_step(model, &batch)?,
                    };
                    reward_sum += r.mean_reward * batch.len() as f64;
                    summary.rl_updates += 1;
                    log.write(&LogRecord {
                        step: step as u64,
                        kind: "rl".into(),
                        reward: Some(r.mean_reward),
                        agree: Some(agreed as f64 / n as f64),
                        baseline: Some(r.baseline),
                        grad_norm: Some(r.grad_norm),
                        ..Default::default()
                    })?;
                }
                if summary.episodes >= next_eval || summary.episodes == run.episodes {
                    on_eval(model, summary.episodes)?;
                    next_eval += run.eval_every;
                }
            }
            StepKind::Sl => {
                let b = trainer.config.batch_size.min(sl_data.len());
                let batch: Vec<EncodedSample> = sl_data.choose_multiple(rng, b).cloned().collect();
                let r = trainer.sl_step(model, &batch, rng)?;
                summary.sl_updates += 1;
                log.write(&LogRecord {
                    step: step as u64,
                    kind: "sl".into(),
                    reconstruction: Some(r.reconstruction),
                    kl: Some(r.kl),
                    total: Some(r.total),
                    ppl: Some(r.ppl),
                    ..Default::default()
                })?;
            }
        }
        step += 1;
    }
    log.flush()?;
    summary.mean_reward = reward_sum / summary.episodes.max(1) as f64;
    Ok(summary)
}
