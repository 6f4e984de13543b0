//! Perplexity, with latent models marginalized by Monte Carlo over the policy.

use rand::SeedableRng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use larl_tensor::{Scalar, Tape};

use crate::corpus::EncodedSample;
use crate::error::{LarlError, Result};
use crate::latent::{categorical_probs, LatentAction, LatentParams, LatentSample};
use crate::model::DialogModel;
use crate::rng::Rng;

/// Examples per forward pass.
const CHUNK: usize = 32;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How the Monte-Carlo average is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplForm {
    /// `log mean_n p(x|z_n)`, `z_n ~ p(z|c)`.
    #[default]
    Marginal,
    /// `log mean_n p(x|z_n) p(z_n|c)`, `z_n ~ p(z|c)`.
    PolicyWeighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub ppl: f64,
    pub log_likelihood: f64,
    /// Target tokens, EOS included.
    pub tokens: usize,
}

/// Numerically stable `log(mean(exp(xs)))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

/// Per-example stream keyed by content, so results do not depend on the
/// order or batching of the dataset.
fn example_rng(seed: u64, s: &EncodedSample) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    let mut eat = |x: u64| {
        h ^= x;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    for u in &s.context {
        for &t in u {
            eat(t as u64);
        }
        eat(u64::MAX);
    }
    for &t in &s.target {
        eat(t as u64);
    }
    Rng::seed_from_u64(h)
}

/// `n` draws from one example's policy and their log-densities.
fn draw(params: &LatentParams, tape: &Tape<impl Scalar>, row: usize, n: usize, rng: &mut Rng) -> Result<Vec<(LatentAction, f64)>> {
    match params {
        LatentParams::Categorical(p) => {
            let probs = categorical_probs(tape, p);
            let rows = &probs[row * p.m..(row + 1) * p.m];
            let dists = rows
                .iter()
                .map(|r| WeightedIndex::new(r).map_err(|e| LarlError::Input(format!("latent policy: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((0..n)
                .map(|_| {
                    let z: Vec<usize> = dists.iter().map(|d| d.sample(rng)).collect();
                    let lp = z.iter().zip(rows).map(|(&k, r)| r[k].ln()).sum();
                    (LatentAction::Categorical(z), lp)
                })
                .collect())
        }
        LatentParams::Gaussian(p) => {
            let mu: Vec<f64> = tape.value(p.mu).row_slice(row).iter().map(|x| x.to_f64_lossy()).collect();
            let lv: Vec<f64> = tape.value(p.log_var).row_slice(row).iter().map(|x| x.to_f64_lossy()).collect();
            Ok((0..n)
                .map(|_| {
                    let eps: Vec<f64> = mu.iter().map(|_| StandardNormal.sample(rng)).collect();
                    let z: Vec<f64> = mu.iter().zip(&lv).zip(&eps).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect();
                    let lp = lv.iter().zip(&eps).map(|(l, e)| -0.5 * (LN_2PI + l + e * e)).sum();
                    (LatentAction::Gaussian(z), lp)
                })
                .collect())
        }
    }
}

/// Per-example `log p(x|c)` estimates, aligned with `samples`.
pub fn mc_log_likelihoods<T: Scalar>(
    model: &DialogModel<T>,
    samples: &[EncodedSample],
    n_samples: usize,
    seed: u64,
    form: PplForm,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(LarlError::Config("ppl samples must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let mut tape = Tape::no_grad();
        let mut unused = Rng::seed_from_u64(0);
        let ctxs: Vec<&[Vec<usize>]> = chunk.iter().map(|s| s.context.as_slice()).collect();
        let responses: Vec<&[usize]> = chunk
            .iter()
            .map(|s| {
                s.target
                    .split_last()
                    .filter(|(&e, _)| e == model.config.eos_id)
                    .map(|(_, r)| r)
                    .ok_or_else(|| LarlError::Input("target must end with EOS".into()))
            })
            .collect::<Result<_>>()?;
        let h = model.encode_contexts(&mut tape, &ctxs, &mut unused)?;
        if model.config.latent.is_none() {
            out.extend(model.response_log_likelihood(&mut tape, Some(h), None, &responses, &mut unused)?);
            continue;
        }
        let params = model.policy_params(&mut tape, h)?;
        let mut actions = Vec::with_capacity(chunk.len() * n_samples);
        let mut log_pz = Vec::with_capacity(chunk.len() * n_samples);
        let mut rep = Vec::with_capacity(chunk.len() * n_samples);
        for (i, s) in chunk.iter().enumerate() {
            let mut rng = example_rng(seed, s);
            for (a, lp) in draw(&params, &tape, i, n_samples, &mut rng)? {
                actions.push(a);
                log_pz.push(lp);
                rep.push(responses[i]);
            }
        }
        let z = LatentSample::from_actions(&mut tape, &actions)?;
        let ll = model.response_log_likelihood(&mut tape, None, Some(&z), &rep, &mut unused)?;
        for (i, per) in ll.chunks(n_samples).enumerate() {
            let terms: Vec<f64> = match form {
                PplForm::Marginal => per.to_vec(),
                PplForm::PolicyWeighted => per
                    .iter()
                    .zip(&log_pz[i * n_samples..(i + 1) * n_samples])
                    .map(|(a, b)| a + b)
                    .collect(),
            };
            out.push(log_mean_exp(&terms));
        }
    }
    Ok(out)
}

/// `exp(-Σ log p(x|c) / Σ |x|)`, counting EOS as a token.
pub fn mc_perplexity<T: Scalar>(
    model: &DialogModel<T>,
    samples: &[EncodedSample],
    n_samples: usize,
    seed: u64,
    form: PplForm,
) -> Result<Perplexity> {
    if samples.is_empty() {
        return Err(LarlError::Input("perplexity needs at least one sample".into()));
    }
    let ll = mc_log_likelihoods(model, samples, n_samples, seed, form)?;
    let log_likelihood: f64 = ll.iter().sum();
    let tokens: usize = samples.iter().map(|s| s.target.len()).sum();
    Ok(Perplexity {
        ppl: (-log_likelihood / tokens as f64).exp(),
        log_likelihood,
        tokens,
    })
}
