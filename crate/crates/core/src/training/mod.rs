//! Supervised objectives, policy-gradient updates and their bookkeeping.

mod log;
mod losses;
mod reinforce;
mod returns;
mod rl;
mod supervised;

pub use log::{LogRecord, TrainLog};
pub use losses::{full_elbo_loss, lite_elbo_loss, sl_loss, sl_loss_mle, Loss, LossReport};
pub use reinforce::{
    latent_policy_gradient, word_policy_gradient, Action, Episode, Reinforce, RlReport, Step,
};
pub use returns::{compute_returns, terminal_returns, token_returns, Baseline, RlSlSchedule, StepKind, WordReturns};
pub use rl::{collect_episode, rl_train, RlRun, RlSummary, RlTask};
pub use supervised::{evaluate_loss, pretrain, sl_step, PretrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{LarlError, Result};

/// Where the baseline enters the returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePlacement {
    /// Subtracted once from the final reward before discounting.
    Terminal,
    /// Subtracted from every reward, as in the literal return formula.
    EveryStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sl_lr: f64,
    pub sl_clip: Option<f64>,
    pub rl_lr: f64,
    pub rl_clip: Option<f64>,
    pub gamma: f64,
    pub rl_sl: RlSlSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// Monte-Carlo samples of z per example for perplexity.
    pub ppl_samples: usize,
    /// Latent samples per (x, c) per ELBO evaluation.
    pub elbo_samples: usize,
    pub gumbel_tau: f64,
    pub baseline_decay: f64,
    pub baseline_placement: BaselinePlacement,
    pub word_returns: WordReturns,
}

impl TrainConfig {
    /// Negotiation defaults.
    pub fn negotiation() -> Self {
        Self {
            sl_lr: 1e-3,
            sl_clip: Some(5.0),
            rl_lr: 0.2,
            rl_clip: Some(0.1),
            gamma: 0.95,
            rl_sl: RlSlSchedule::Off,
            batch_size: 16,
            epochs: 10,
            ppl_samples: 10,
            elbo_samples: 1,
            gumbel_tau: 1.0,
            baseline_decay: 0.95,
            baseline_placement: BaselinePlacement::Terminal,
            word_returns: WordReturns::PerToken,
        }
    }

    /// Slot-filling defaults.
    pub fn slotfill() -> Self {
        Self {
            rl_lr: 0.01,
            rl_clip: Some(0.5),
            gamma: 0.99,
            ..Self::negotiation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LarlError::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.sl_lr > 0.0 && self.rl_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.sl_clip.is_some_and(|c| !(c > 0.0)) || self.rl_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norms must be positive".into());
        }
        if self.batch_size == 0 || self.ppl_samples == 0 || self.elbo_samples == 0 {
            return bad("batch_size, ppl_samples and elbo_samples must be positive".into());
        }
        if !(self.gumbel_tau > 0.0) {
            return bad("gumbel_tau must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must lie in [0, 1]".into());
        }
        self.rl_sl.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let n = TrainConfig::negotiation();
        assert_eq!((n.sl_lr, n.rl_lr, n.rl_clip, n.gamma), (1e-3, 0.2, Some(0.1), 0.95));
        let s = TrainConfig::slotfill();
        assert_eq!((s.rl_lr, s.rl_clip, s.gamma), (0.01, Some(0.5), 0.99));
        n.validate().unwrap();
        s.validate().unwrap();
    }

    #[test]
    fn invalid_gamma_is_rejected() {
        let c = TrainConfig {
            gamma: 1.5,
            ..TrainConfig::negotiation()
        };
        assert!(c.validate().is_err());
    }
}
