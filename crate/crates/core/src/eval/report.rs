//! Test-set evaluation of a frozen model on either task.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use larl_tensor::Scalar;

use crate::corpus::negotiation::Scenario;
use crate::corpus::slotfill::KbEntity;
use crate::corpus::{Dialog, EncodedSample, Vocabulary, MAX_TURNS};
use crate::env::negotiation::{negotiation_episode, NegotiationEnv, NegotiationTranscript, OpponentKind, AGENT};
use crate::env::slotfill::{bandit_episode, system_turns, BanditEpisodeResult};
use crate::env::ActConfig;
use crate::error::{LarlError, Result};
use crate::eval::ppl::{mc_perplexity, PplForm};
use crate::eval::text::{corpus_bleu, diversity};
use crate::model::DialogModel;
use crate::rng::SeedTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Negotiation,
    Slotfill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ppl_samples: usize,
    pub ppl_form: PplForm,
    pub seed: u64,
    pub max_len: usize,
    pub max_turns: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ppl_samples: 20,
            ppl_form: PplForm::Marginal,
            seed: 0,
            max_len: 20,
            max_turns: MAX_TURNS,
        }
    }
}

/// Percentages are in `[0, 100]`; task-specific fields are `None` for the
/// other task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub ppl: f64,
    pub reward_mean: f64,
    pub agree_pct: Option<f64>,
    pub diversity: usize,
    pub bleu: Option<f64>,
    pub inform_pct: Option<f64>,
    pub success_pct: Option<f64>,
    /// Episodes rolled out.
    pub episodes: usize,
    /// Responses generated by the agent.
    pub responses: usize,
}

fn pct(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

fn encoded(dialogs: &[Dialog], vocab: &Vocabulary) -> Vec<EncodedSample> {
    dialogs.iter().flat_map(Dialog::samples).map(|s| s.encode(vocab)).collect()
}

/// Mean agent reward, agreement rate and agent diversity of finished games.
pub fn negotiation_stats(transcripts: &[NegotiationTranscript]) -> (f64, f64, usize, usize) {
    let n = transcripts.len();
    let reward = if n == 0 {
        0.0
    } else {
        transcripts.iter().map(|t| t.outcome.rewards[AGENT]).sum::<f64>() / n as f64
    };
    let agreed = transcripts.iter().filter(|t| t.outcome.agreement).count();
    let said: Vec<Vec<&str>> = transcripts
        .iter()
        .flat_map(|t| t.turns.iter().filter(|(s, _)| *s == AGENT))
        .map(|(_, u)| u.split_whitespace().collect())
        .collect();
    (reward, pct(agreed, n), diversity(&said), said.len())
}

/// Perplexity on `test`, then one greedy game per scenario.
pub fn evaluate_negotiation<T: Scalar>(
    model: &DialogModel<T>,
    vocab: &Vocabulary,
    test: &[Dialog],
    scenarios: &[Scenario],
    opponent: &OpponentKind<T>,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<NegotiationTranscript>)> {
    if scenarios.is_empty() {
        return Err(LarlError::Input("no test scenarios".into()));
    }
    let ppl = mc_perplexity(model, &encoded(test, vocab), cfg.ppl_samples, cfg.seed, cfg.ppl_form)?;
    let tree = SeedTree::new(cfg.seed).child("eval-negotiation");
    let act = ActConfig {
        stochastic: false,
        max_len: cfg.max_len,
    };
    let mut transcripts = Vec::with_capacity(scenarios.len());
    for (i, sc) in scenarios.iter().enumerate() {
        let mut rng = tree.indexed("game", i as u64);
        let mut env = NegotiationEnv::reset(sc.clone(), opponent, rng.random(), cfg.max_turns)?;
        let (_, tr) = negotiation_episode(model, vocab, &mut env, act, &mut rng)?;
        transcripts.push(tr);
    }
    let (reward_mean, agree, div, responses) = negotiation_stats(&transcripts);
    Ok((
        EvalReport {
            task: TaskKind::Negotiation,
            ppl: ppl.ppl,
            reward_mean,
            agree_pct: Some(agree),
            diversity: div,
            bleu: None,
            inform_pct: None,
            success_pct: None,
            episodes: transcripts.len(),
            responses,
        },
        transcripts,
    ))
}

/// BLEU, inform and success rates of bandit rollouts against the gold
/// system turns of the same dialogs.
pub fn slotfill_stats(dialogs: &[Dialog], results: &[BanditEpisodeResult]) -> Result<(f64, f64, f64, usize, usize)> {
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (d, r) in dialogs.iter().zip(results) {
        let (_, turns) = system_turns(d)?;
        for ((i, _), c) in turns.iter().zip(&r.responses) {
            cands.push(c.clone());
            refs.push(d.turns[*i].tokens());
        }
    }
    let n = results.len();
    let bleu = corpus_bleu(&cands, &refs)?;
    let inform = pct(results.iter().filter(|r| r.inform).count(), n);
    let success = pct(results.iter().filter(|r| r.success).count(), n);
    Ok((bleu, inform, success, diversity(&cands), cands.len()))
}

/// Perplexity on `ppl_dialogs`, then a greedy bandit rollout of each of
/// `test`.
pub fn evaluate_slotfill<T: Scalar>(
    model: &DialogModel<T>,
    vocab: &Vocabulary,
    ppl_dialogs: &[Dialog],
    test: &[Dialog],
    kb: &[KbEntity],
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<BanditEpisodeResult>)> {
    if test.is_empty() {
        return Err(LarlError::Input("no test dialogs".into()));
    }
    let ppl = mc_perplexity(model, &encoded(ppl_dialogs, vocab), cfg.ppl_samples, cfg.seed, cfg.ppl_form)?;
    let tree = SeedTree::new(cfg.seed).child("eval-slotfill");
    let act = ActConfig {
        stochastic: false,
        max_len: cfg.max_len,
    };
    let mut results = Vec::with_capacity(test.len());
    for (i, d) in test.iter().enumerate() {
        let mut rng = tree.indexed("dialog", i as u64);
        results.push(bandit_episode(model, vocab, d, kb, act, &mut rng)?.1);
    }
    let (bleu, inform, success, div, responses) = slotfill_stats(test, &results)?;
    Ok((
        EvalReport {
            task: TaskKind::Slotfill,
            ppl: ppl.ppl,
            reward_mean: success / 100.0,
            agree_pct: None,
            diversity: div,
            bleu: Some(bleu),
            inform_pct: Some(inform),
            success_pct: Some(success),
            episodes: results.len(),
            responses,
        },
        results,
    ))
}
