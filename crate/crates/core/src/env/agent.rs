//! Turning a dialog model into an acting agent.

use larl_tensor::{Scalar, Tape};

use crate::corpus::Vocabulary;
use crate::error::Result;
use crate::latent::{
    argmax_categorical, categorical_log_prob, gaussian_log_prob, sample_categorical, sample_gaussian, LatentParams,
    LatentSample,
};
use crate::model::{DecodeMode, DialogModel};
use crate::rng::Rng;
use crate::training::Action;

/// How an agent chooses its actions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActConfig {
    /// Sample z (latent models) or words (word models); otherwise take the
    /// most likely z / greedy words.
    pub stochastic: bool,
    pub max_len: usize,
}

/// One generated response and the action that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTurn {
    pub context: Vec<Vec<usize>>,
    pub words: Vec<String>,
    pub action: Action,
    pub log_prob: f64,
}

/// Responds to each encoded context. Latent models draw z from `p(z|c)`
/// and decode greedily; word models decode directly.
pub fn act_batch<T: Scalar>(
    model: &DialogModel<T>,
    vocab: &Vocabulary,
    contexts: &[Vec<Vec<usize>>],
    cfg: ActConfig,
    rng: &mut Rng,
) -> Result<Vec<AgentTurn>> {
    let b = contexts.len();
    let mut tape = Tape::no_grad();
    let refs: Vec<&[Vec<usize>]> = contexts.iter().map(Vec::as_slice).collect();
    let h = model.encode_contexts(&mut tape, &refs, rng)?;
    let (z, latent) = match model.config.latent {
        None => (None, None),
        Some(_) => match model.policy_params(&mut tape, h)? {
            LatentParams::Categorical(p) => {
                let idx = if cfg.stochastic {
                    sample_categorical(&tape, &p, rng)
                } else {
                    argmax_categorical(&tape, &p)
                };
                let lp = categorical_log_prob(&mut tape, &p, &idx)?;
                let lp = tape.value(lp).to_f64_vec();
                (Some(LatentSample::Categorical(idx)), Some(lp))
            }
            LatentParams::Gaussian(p) => {
                let z = if cfg.stochastic {
                    sample_gaussian(&mut tape, &p, rng, false)?
                } else {
                    let mu = tape.value(p.mu).clone();
                    tape.constant(mu)
                };
                let lp = gaussian_log_prob(&mut tape, z, &p)?;
                let lp = tape.value(lp).to_f64_vec();
                (Some(LatentSample::Gaussian(z)), Some(lp))
            }
        },
    };
    let state = model.decoder_init(&mut tape, Some(h), z.as_ref(), b)?;
    let mode = if latent.is_none() && cfg.stochastic {
        DecodeMode::Sample
    } else {
        DecodeMode::Greedy
    };
    let decoded = model.decode(&mut tape, state, mode, cfg.max_len, rng)?;
    let actions = match (&z, &latent) {
        (Some(z), Some(_)) => Some(z.actions(&tape, b)?),
        _ => None,
    };
    let eos = model.config.eos_id;
    let mut out = Vec::with_capacity(b);
    for (i, d) in decoded.into_iter().enumerate() {
        let words = d.tokens.iter().map(|&t| vocab.token(t).to_string()).collect();
        let (action, log_prob) = match (&actions, &latent) {
            (Some(a), Some(lp)) => (Action::Latent(a[i].clone()), lp[i]),
            _ => {
                let mut ids = d.tokens.clone();
                if d.ended {
                    ids.push(eos);
                }
                let lp = d.log_prob();
                (Action::Words(ids), lp)
            }
        };
        out.push(AgentTurn {
            context: contexts[i].clone(),
            words,
            action,
            log_prob,
        });
    }
    Ok(out)
}

/// Single-context convenience over [`act_batch`].
pub fn act<T: Scalar>(
    model: &DialogModel<T>,
    vocab: &Vocabulary,
    context: &[Vec<String>],
    cfg: ActConfig,
    rng: &mut Rng,
) -> Result<AgentTurn> {
    let ids: Vec<Vec<usize>> = context.iter().map(|u| vocab.encode(u)).collect();
    Ok(act_batch(model, vocab, &[ids], cfg, rng)?.remove(0))
}
