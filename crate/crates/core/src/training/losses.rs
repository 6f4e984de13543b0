use larl_tensor::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::corpus::EncodedSample;
use crate::error::{LarlError, Result};
use crate::latent::{categorical_kl, gaussian_kl, gumbel_softmax_sample, sample_gaussian, LatentParams, LatentSample};
use crate::model::{DialogModel, Objective};
use crate::rng::Rng;

/// Scalar summary of one loss evaluation.
///
/// `reconstruction` is the negative log-likelihood per target token, `kl`
/// the divergence per example, and `total = reconstruction + kl_weight · kl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub reconstruction: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub total: f64,
    pub tokens: usize,
    /// `exp(reconstruction)`.
    pub ppl: f64,
}

#[derive(Clone, Debug)]
pub struct Loss {
    pub total: Var,
    pub report: LossReport,
}

fn split(batch: &[EncodedSample]) -> Result<(Vec<&[Vec<usize>]>, Vec<&[usize]>)> {
    if batch.is_empty() {
        return Err(LarlError::Input("empty batch".into()));
    }
    let ctx = batch.iter().map(|s| s.context.as_slice()).collect();
    let tgt = batch.iter().map(|s| s.target.as_slice()).collect();
    Ok((ctx, tgt))
}

/// Per-token NLL of `targets` given decoder inputs `h`/`z`.
fn reconstruction<T: Scalar>(
    model: &DialogModel<T>,
    tape: &mut Tape<T>,
    h: Option<Var>,
    z: Option<&LatentSample>,
    targets: &[&[usize]],
    rng: &mut Rng,
) -> Result<(Var, usize)> {
    let state = model.decoder_init(tape, h, z, targets.len())?;
    let tf = model.teacher_forced(tape, state, targets, rng)?;
    let tokens = tf.tokens();
    let s = tape.sum(tf.token_logp);
    Ok((tape.scale(s, T::lit(-1.0 / tokens as f64)), tokens))
}

fn finish<T: Scalar>(tape: &mut Tape<T>, rec: Var, kl: Option<Var>, weight: f64, tokens: usize) -> Result<Loss> {
    let r = tape.value(rec).item()?.to_f64_lossy();
    let (total, k) = match kl {
        Some(kl) => {
            let w = tape.scale(kl, T::lit(weight));
            let total = tape.add(rec, w)?;
            (total, tape.value(kl).item()?.to_f64_lossy())
        }
        None => (rec, 0.0),
    };
    Ok(Loss {
        total,
        report: LossReport {
            reconstruction: r,
            kl: k,
            kl_weight: weight,
            total: tape.value(total).item()?.to_f64_lossy(),
            tokens,
            ppl: r.exp(),
        },
    })
}

/// Averages the per-sample reconstruction terms.
fn mean_of<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, T::lit(1.0 / terms.len() as f64)))
}

/// Draws a differentiable sample from latent params.
fn relaxed_sample<T: Scalar>(tape: &mut Tape<T>, p: &LatentParams, tau: f64, rng: &mut Rng) -> Result<LatentSample> {
    Ok(match p {
        LatentParams::Gaussian(g) => LatentSample::Gaussian(sample_gaussian(tape, g, rng, true)?),
        LatentParams::Categorical(c) => LatentSample::Relaxed {
            rows: gumbel_softmax_sample(tape, c, tau, rng)?,
            tau,
        },
    })
}

/// Mean over the batch of `KL(q || p)`; `p = None` is the fixed prior.
fn batch_kl<T: Scalar>(tape: &mut Tape<T>, q: &LatentParams, p: Option<&LatentParams>) -> Result<Var> {
    let per = match (q, p) {
        (LatentParams::Gaussian(q), None) => gaussian_kl(tape, q, None)?,
        (LatentParams::Gaussian(q), Some(LatentParams::Gaussian(p))) => gaussian_kl(tape, q, Some(p))?,
        (LatentParams::Categorical(q), None) => categorical_kl(tape, q, None)?,
        (LatentParams::Categorical(q), Some(LatentParams::Categorical(p))) => categorical_kl(tape, q, Some(p))?,
        _ => return Err(LarlError::Input("latent kinds of q and p differ".into())),
    };
    Ok(tape.mean(per))
}

/// Word-level maximum likelihood: mean NLL per target token.
pub fn sl_loss_mle<T: Scalar>(model: &DialogModel<T>, tape: &mut Tape<T>, batch: &[EncodedSample], rng: &mut Rng) -> Result<Loss> {
    if model.config.latent.is_some() {
        return Err(LarlError::Config("maximum likelihood needs a word-level model".into()));
    }
    let (ctx, tgt) = split(batch)?;
    let h = model.encode_contexts(tape, &ctx, rng)?;
    let (rec, tokens) = reconstruction(model, tape, Some(h), None, &tgt, rng)?;
    finish(tape, rec, None, 0.0, tokens)
}

/// `−[E_q log p(x|z) − KL(q(z|x,c) || p(z|c))]` with reparameterized or
/// Gumbel-Softmax samples from `q`.
pub fn full_elbo_loss<T: Scalar>(
    model: &DialogModel<T>,
    tape: &mut Tape<T>,
    batch: &[EncodedSample],
    tau: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<Loss> {
    let (ctx, tgt) = split(batch)?;
    let h = model.encode_contexts(tape, &ctx, rng)?;
    let q = model.posterior_params(tape, h, &tgt, rng)?;
    let p = model.policy_params(tape, h)?;
    let mut recs = Vec::with_capacity(samples.max(1));
    let mut tokens = 0;
    for _ in 0..samples.max(1) {
        let z = relaxed_sample(tape, &q, tau, rng)?;
        let (r, n) = reconstruction(model, tape, None, Some(&z), &tgt, rng)?;
        recs.push(r);
        tokens = n;
    }
    let rec = mean_of(tape, &recs)?;
    let kl = batch_kl(tape, &q, Some(&p))?;
    finish(tape, rec, Some(kl), 1.0, tokens)
}

/// `−[E_{p(z|c)} log p(x|z) − β·KL(p(z|c) || p(z))]` with a uniform or
/// standard-normal prior `p(z)`.
pub fn lite_elbo_loss<T: Scalar>(
    model: &DialogModel<T>,
    tape: &mut Tape<T>,
    batch: &[EncodedSample],
    tau: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<Loss> {
    let (ctx, tgt) = split(batch)?;
    let h = model.encode_contexts(tape, &ctx, rng)?;
    let p = model.policy_params(tape, h)?;
    let mut recs = Vec::with_capacity(samples.max(1));
    let mut tokens = 0;
    for _ in 0..samples.max(1) {
        let z = relaxed_sample(tape, &p, tau, rng)?;
        let (r, n) = reconstruction(model, tape, None, Some(&z), &tgt, rng)?;
        recs.push(r);
        tokens = n;
    }
    let rec = mean_of(tape, &recs)?;
    let kl = batch_kl(tape, &p, None)?;
    finish(tape, rec, Some(kl), model.config.beta, tokens)
}

/// The supervised loss selected by the model's objective.
pub fn sl_loss<T: Scalar>(
    model: &DialogModel<T>,
    tape: &mut Tape<T>,
    batch: &[EncodedSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Loss> {
    match model.config.objective {
        Objective::Mle => sl_loss_mle(model, tape, batch, rng),
        Objective::FullElbo => full_elbo_loss(model, tape, batch, cfg.gumbel_tau, cfg.elbo_samples, rng),
        Objective::LiteElbo => lite_elbo_loss(model, tape, batch, cfg.gumbel_tau, cfg.elbo_samples, rng),
    }
}
