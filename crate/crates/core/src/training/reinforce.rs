use larl_tensor::{Grads, Optimizer, Scalar, Tape, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::losses::LossReport;
use super::returns::{terminal_returns, token_returns, Baseline};
use super::TrainConfig;
use crate::corpus::EncodedSample;
use crate::error::{LarlError, Result};
use crate::latent::{categorical_log_prob, gaussian_log_prob, LatentAction, LatentParams};
use crate::model::{DialogModel, Side};
use crate::rng::Rng;

/// What the agent emitted at one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Latent(LatentAction),
    /// Scored tokens of the response, EOS included when emitted.
    Words(Vec<usize>),
}

/// One agent turn of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub context: Vec<Vec<usize>>,
    pub action: Action,
    pub log_prob: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<Step>,
}

impl Episode {
    /// Dialog length `T` in agent turns.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Token counts `U_t`; zero for latent actions.
    pub fn token_counts(&self) -> Vec<usize> {
        self.steps
            .iter()
            .map(|s| match &s.action {
                Action::Words(w) => w.len(),
                Action::Latent(_) => 0,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(LarlError::Input("episode has no steps".into()));
        }
        for s in &self.steps {
            if !s.reward.is_finite() {
                return Err(LarlError::Input(format!("non-finite reward {}", s.reward)));
            }
            if s.context.is_empty() {
                return Err(LarlError::Input("step without context".into()));
            }
            if matches!(&s.action, Action::Words(w) if w.is_empty()) {
                return Err(LarlError::Input("word action without tokens".into()));
            }
        }
        Ok(())
    }
}

fn eval_tape<T: Scalar>(model: &DialogModel<T>, side: Option<Side>) -> Tape<T> {
    match side {
        Some(s) => Tape::new(model.grad_mode(s)),
        None => Tape::with_grad(),
    }
}

/// Gradient of `−Σ_t R_t log p(z_t | c_t)` over all steps of `episodes`,
/// restricted to θe. `returns[e][t]` pairs with `episodes[e].steps[t]`.
pub fn latent_policy_gradient<T: Scalar>(model: &DialogModel<T>, episodes: &[Episode], returns: &[Vec<f64>]) -> Result<Grads<T>> {
    let mut contexts = Vec::new();
    let mut actions = Vec::new();
    let mut weights = Vec::new();
    for (ep, rs) in episodes.iter().zip(returns) {
        if rs.len() != ep.steps.len() {
            return Err(LarlError::Input("one return per step required".into()));
        }
        for (s, &r) in ep.steps.iter().zip(rs) {
            match &s.action {
                Action::Latent(a) => actions.push(a.clone()),
                Action::Words(_) => return Err(LarlError::Input("latent REINFORCE received word actions".into())),
            }
            contexts.push(s.context.as_slice());
            weights.push(T::lit(-r));
        }
    }
    if contexts.is_empty() {
        return Err(LarlError::Input("no steps to learn from".into()));
    }
    let n = contexts.len();
    let mut tape = eval_tape(model, Some(Side::Encoder));
    let mut rng = Rng::seed_from_u64(0);
    let h = model.encode_contexts(&mut tape, &contexts, &mut rng)?;
    let logp = match model.policy_params(&mut tape, h)? {
        LatentParams::Categorical(p) => {
            let mut idx = Vec::with_capacity(n * p.m);
            for a in &actions {
                match a {
                    LatentAction::Categorical(z) if z.len() == p.m => idx.extend_from_slice(z),
                    _ => return Err(LarlError::Input("latent action does not match the policy".into())),
                }
            }
            categorical_log_prob(&mut tape, &p, &idx)?
        }
        LatentParams::Gaussian(p) => {
            let m = tape.shape(p.mu)[1];
            let mut data = Vec::with_capacity(n * m);
            for a in &actions {
                match a {
                    LatentAction::Gaussian(z) if z.len() == m => data.extend(z.iter().map(|&x| T::lit(x))),
                    _ => return Err(LarlError::Input("latent action does not match the policy".into())),
                }
            }
            let z = tape.constant(Tensor::new(vec![n, m], data)?);
            gaussian_log_prob(&mut tape, z, &p)?
        }
    };
    let w = tape.constant(Tensor::new(vec![n, 1], weights)?);
    let weighted = tape.mul(logp, w)?;
    let loss = tape.sum(weighted);
    let mut grads = tape.backward(loss)?.into_params();
    let enc = model.params_on(Side::Encoder);
    grads.zero_fill(&model.store, enc.iter().copied());
    grads.retain(|id| model.side(id) == Side::Encoder);
    Ok(grads)
}

/// Gradient of `−Σ_t Σ_j R_tj log p(w_tj | w_<tj, c_t)` over all
/// parameters of a word-level model.
pub fn word_policy_gradient<T: Scalar>(model: &DialogModel<T>, episodes: &[Episode], returns: &[Vec<Vec<f64>>]) -> Result<Grads<T>> {
    if model.config.latent.is_some() {
        return Err(LarlError::Config("word-level REINFORCE needs a word-level model".into()));
    }
    let mut contexts = Vec::new();
    let mut targets = Vec::new();
    let mut rets: Vec<&[f64]> = Vec::new();
    for (ep, rs) in episodes.iter().zip(returns) {
        if rs.len() != ep.steps.len() {
            return Err(LarlError::Input("one return vector per step required".into()));
        }
        for (s, r) in ep.steps.iter().zip(rs) {
            let w = match &s.action {
                Action::Words(w) => w,
                Action::Latent(_) => return Err(LarlError::Input("word REINFORCE received latent actions".into())),
            };
            if r.len() != w.len() {
                return Err(LarlError::Input("one return per token required".into()));
            }
            contexts.push(s.context.as_slice());
            targets.push(w.as_slice());
            rets.push(r);
        }
    }
    if contexts.is_empty() {
        return Err(LarlError::Input("no steps to learn from".into()));
    }
    let b = contexts.len();
    let mut tape = eval_tape(model, None);
    let mut rng = Rng::seed_from_u64(0);
    let h = model.encode_contexts(&mut tape, &contexts, &mut rng)?;
    let state = model.decoder_init(&mut tape, Some(h), None, b)?;
    let tf = model.teacher_forced(&mut tape, state, &targets, &mut rng)?;
    let mut w = vec![T::zero(); tf.steps * b];
    for (row, r) in rets.iter().enumerate() {
        for (j, &x) in r.iter().enumerate() {
            w[j * b + row] = T::lit(-x);
        }
    }
    let w = tape.constant(Tensor::new(vec![tf.steps * b, 1], w)?);
    let weighted = tape.mul(tf.token_logp, w)?;
    let loss = tape.sum(weighted);
    let mut grads = tape.backward(loss)?.into_params();
    grads.zero_fill(&model.store, model.all_params());
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub episodes: usize,
    pub mean_reward: f64,
    /// Baseline value used for this update.
    pub baseline: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Policy-gradient trainer state: optimizers and the running baseline.
#[derive(Clone, Debug)]
pub struct Reinforce<T> {
    pub config: TrainConfig,
    pub baseline: Baseline,
    pub rl_optimizer: Optimizer<T>,
    pub sl_optimizer: Optimizer<T>,
}

impl<T: Scalar> Reinforce<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            baseline: Baseline::new(config.baseline_decay)?,
            rl_optimizer: Optimizer::sgd(config.rl_lr, config.rl_clip)?,
            sl_optimizer: Optimizer::adam(config.sl_lr, config.sl_clip)?,
            config,
        })
    }

    fn check(episodes: &[Episode]) -> Result<()> {
        if episodes.is_empty() {
            return Err(LarlError::Input("no episodes".into()));
        }
        episodes.iter().try_for_each(Episode::validate)
    }

    fn observe(&mut self, episodes: &[Episode]) -> Result<f64> {
        let mut sum = 0.0;
        for e in episodes {
            let g = e.total_reward();
            sum += g;
            self.baseline.update(g)?;
        }
        Ok(sum / episodes.len() as f64)
    }

    /// Latent-action REINFORCE; updates θe only.
    pub fn latent_step(&mut self, model: &mut DialogModel<T>, episodes: &[Episode]) -> Result<RlReport> {
        Self::check(episodes)?;
        let b = self.baseline.value;
        let returns: Vec<Vec<f64>> = episodes
            .iter()
            .map(|e| terminal_returns(&e.rewards(), self.config.gamma, b, self.config.baseline_placement))
            .collect();
        let grads = latent_policy_gradient(model, episodes, &returns)?;
        let norm = grads.global_norm().to_f64_lossy();
        let ids = model.params_on(Side::Encoder);
        self.rl_optimizer.step(&mut model.store, &ids, &grads)?;
        let mean_reward = self.observe(episodes)?;
        Ok(RlReport {
            episodes: episodes.len(),
            mean_reward,
            baseline: b,
            grad_norm: norm,
        })
    }

    /// Word-level REINFORCE; updates every parameter.
    pub fn word_step(&mut self, model: &mut DialogModel<T>, episodes: &[Episode]) -> Result<RlReport> {
        Self::check(episodes)?;
        let b = self.baseline.value;
        let mut returns = Vec::with_capacity(episodes.len());
        for e in episodes {
            returns.push(token_returns(
                &e.rewards(),
                &e.token_counts(),
                self.config.gamma,
                b,
                self.config.baseline_placement,
                self.config.word_returns,
            )?);
        }
        let grads = word_policy_gradient(model, episodes, &returns)?;
        let norm = grads.global_norm().to_f64_lossy();
        let ids = model.all_params();
        self.rl_optimizer.step(&mut model.store, &ids, &grads)?;
        let mean_reward = self.observe(episodes)?;
        Ok(RlReport {
            episodes: episodes.len(),
            mean_reward,
            baseline: b,
            grad_norm: norm,
        })
    }

    /// One supervised update interleaved with policy gradients.
    pub fn sl_step(&mut self, model: &mut DialogModel<T>, batch: &[EncodedSample], rng: &mut Rng) -> Result<LossReport> {
        super::supervised::sl_step(model, &mut self.sl_optimizer, batch, &self.config, rng)
    }
}
