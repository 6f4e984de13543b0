//! Latent action distributions on the tape: diagonal Gaussians and
//! multivariate categoricals, their samples, log-probabilities, KL terms,
//! and the two ways of feeding a sample to the decoder.
//!
//! Batched layouts: Gaussian parameters are `[B, M]`; categorical logits are
//! `[B * M, K]` with row `b * M + m` holding variable `m` of example `b`.

use larl_tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LarlError, Result};
use crate::rng::Rng;

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 10.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Gaussian,
    Categorical,
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    /// `[B, M]`
    pub mu: Var,
    /// `[B, M]`, clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_var: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CategoricalParams {
    /// `[B * M, K]`
    pub logits: Var,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum LatentParams {
    Gaussian(GaussianParams),
    Categorical(CategoricalParams),
}

/// A drawn latent action for a batch.
#[derive(Clone, Debug)]
pub enum LatentSample {
    /// `[B, M]`
    Gaussian(Var),
    /// `B * M` indices, example-major.
    Categorical(Vec<usize>),
    /// `[B * M, K]` simplex rows drawn at temperature `tau`.
    Relaxed { rows: Var, tau: f64 },
}

/// A single example's latent action, detached from any tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentAction {
    Gaussian(Vec<f64>),
    Categorical(Vec<usize>),
}

impl LatentSample {
    /// Splits a batch sample into per-example actions.
    pub fn actions<T: Scalar>(&self, tape: &Tape<T>, batch: usize) -> Result<Vec<LatentAction>> {
        match self {
            LatentSample::Gaussian(z) => {
                let v = tape.value(*z);
                Ok((0..batch)
                    .map(|b| LatentAction::Gaussian(v.row_slice(b).iter().map(|x| x.to_f64_lossy()).collect()))
                    .collect())
            }
            LatentSample::Categorical(idx) => {
                let m = idx.len() / batch;
                Ok(idx.chunks(m).map(|c| LatentAction::Categorical(c.to_vec())).collect())
            }
            LatentSample::Relaxed { .. } => Err(LarlError::Input("relaxed samples have no discrete action".into())),
        }
    }

    /// Rebuilds a batch sample from stored actions.
    pub fn from_actions<T: Scalar>(tape: &mut Tape<T>, actions: &[LatentAction]) -> Result<Self> {
        match actions.first() {
            Some(LatentAction::Gaussian(first)) => {
                let m = first.len();
                let mut data = Vec::with_capacity(actions.len() * m);
                for a in actions {
                    match a {
                        LatentAction::Gaussian(v) if v.len() == m => data.extend(v.iter().map(|&x| T::lit(x))),
                        _ => return Err(LarlError::Input("mixed or ragged latent actions".into())),
                    }
                }
                Ok(LatentSample::Gaussian(tape.constant(Tensor::new(vec![actions.len(), m], data)?)))
            }
            Some(LatentAction::Categorical(first)) => {
                let m = first.len();
                let mut idx = Vec::with_capacity(actions.len() * m);
                for a in actions {
                    match a {
                        LatentAction::Categorical(v) if v.len() == m => idx.extend_from_slice(v),
                        _ => return Err(LarlError::Input("mixed or ragged latent actions".into())),
                    }
                }
                Ok(LatentSample::Categorical(idx))
            }
            None => Err(LarlError::Input("no latent actions".into())),
        }
    }
}

/// Splits a `[B, 2M]` projection into mean and clamped log-variance.
pub fn gaussian_params<T: Scalar>(tape: &mut Tape<T>, raw: Var, m: usize) -> Result<GaussianParams> {
    let mu = tape.slice(raw, 1, 0, m)?;
    let lv = tape.slice(raw, 1, m, m)?;
    let log_var = tape.clamp(lv, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
    Ok(GaussianParams { mu, log_var })
}

/// `z = mu + exp(log_var / 2) * eps`. Detached unless `reparameterized`.
pub fn sample_gaussian<T: Scalar>(tape: &mut Tape<T>, p: &GaussianParams, rng: &mut Rng, reparameterized: bool) -> Result<Var> {
    let shape = tape.shape(p.mu).to_vec();
    let n: usize = shape.iter().product();
    let eps: Vec<T> = (0..n)
        .map(|_| T::lit(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)))
        .collect();
    let eps = tape.constant(Tensor::new(shape, eps)?);
    let half = tape.scale(p.log_var, T::lit(0.5));
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    let z = tape.add(p.mu, noise)?;
    if reparameterized {
        Ok(z)
    } else {
        let v = tape.value(z).clone();
        Ok(tape.constant(v))
    }
}

/// Diagonal-Gaussian log density summed over M, shape `[B, 1]`.
pub fn gaussian_log_prob<T: Scalar>(tape: &mut Tape<T>, z: Var, p: &GaussianParams) -> Result<Var> {
    let diff = tape.sub(z, p.mu)?;
    let sq = tape.mul(diff, diff)?;
    let neg_lv = tape.neg(p.log_var);
    let inv_var = tape.exp(neg_lv);
    let maha = tape.mul(sq, inv_var)?;
    let terms = tape.add(maha, p.log_var)?;
    let s = tape.sum_last(terms);
    let s = tape.scale(s, T::lit(-0.5));
    let shape = tape.shape(p.mu).to_vec();
    let c = tape.constant(Tensor::full(&[shape[0], 1], T::lit(-0.5 * LN_2PI * shape[1] as f64)));
    Ok(tape.add(s, c)?)
}

/// `KL(q || p)` summed over M, shape `[B, 1]`; `p = None` is N(0, I).
pub fn gaussian_kl<T: Scalar>(tape: &mut Tape<T>, q: &GaussianParams, p: Option<&GaussianParams>) -> Result<Var> {
    let var_q = tape.exp(q.log_var);
    let terms = match p {
        None => {
            // mu² + σ² − 1 − ln σ²
            let mu2 = tape.mul(q.mu, q.mu)?;
            let a = tape.add(mu2, var_q)?;
            tape.sub(a, q.log_var)?
        }
        Some(p) => {
            // ln σp² − ln σq² + (σq² + (μq − μp)²) / σp² − 1
            let d = tape.sub(q.mu, p.mu)?;
            let d2 = tape.mul(d, d)?;
            let num = tape.add(var_q, d2)?;
            let neg = tape.neg(p.log_var);
            let inv = tape.exp(neg);
            let ratio = tape.mul(num, inv)?;
            let lr = tape.sub(p.log_var, q.log_var)?;
            tape.add(ratio, lr)?
        }
    };
    let s = tape.sum_last(terms);
    let m = tape.shape(q.mu)[1];
    let rows = tape.shape(q.mu)[0];
    let c = tape.constant(Tensor::full(&[rows, 1], T::lit(-(m as f64))));
    let s = tape.add(s, c)?;
    Ok(tape.scale(s, T::lit(0.5)))
}

/// Views `[B, M * K]` logits as `M` variables of `K` classes.
pub fn categorical_params<T: Scalar>(tape: &mut Tape<T>, raw: Var, m: usize, k: usize) -> Result<CategoricalParams> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 2 || shape[1] != m * k {
        return Err(LarlError::Input(format!("logits of shape {shape:?} are not [B, {m}*{k}]")));
    }
    let logits = tape.reshape(raw, vec![shape[0] * m, k])?;
    Ok(CategoricalParams {
        logits,
        batch: shape[0],
        m,
        k,
    })
}

/// Per-variable probabilities, detached, row-major `[B * M][K]`.
pub fn categorical_probs<T: Scalar>(tape: &Tape<T>, p: &CategoricalParams) -> Vec<Vec<f64>> {
    tape.value(p.logits)
        .data()
        .chunks(p.k)
        .map(|row| {
            let m = row.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x.to_f64_lossy() - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

/// Independent hard draws, one per variable.
pub fn sample_categorical<T: Scalar>(tape: &Tape<T>, p: &CategoricalParams, rng: &mut Rng) -> Vec<usize> {
    categorical_probs(tape, p)
        .into_iter()
        .map(|probs| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &q) in probs.iter().enumerate() {
                acc += q;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        })
        .collect()
}

/// Most probable class per variable.
pub fn argmax_categorical<T: Scalar>(tape: &Tape<T>, p: &CategoricalParams) -> Vec<usize> {
    tape.value(p.logits)
        .data()
        .chunks(p.k)
        .map(|row| {
            let mut best = 0;
            for (i, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `softmax((logits + g) / tau)` with Gumbel noise `g`.
pub fn gumbel_softmax_sample<T: Scalar>(tape: &mut Tape<T>, p: &CategoricalParams, tau: f64, rng: &mut Rng) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(LarlError::Input(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(p.logits).to_vec();
    let n: usize = shape.iter().product();
    let g: Vec<T> = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            T::lit(-(-u.ln()).ln())
        })
        .collect();
    let g = tape.constant(Tensor::new(shape, g)?);
    let noisy = tape.add(p.logits, g)?;
    let scaled = tape.scale(noisy, T::lit(1.0 / tau));
    Ok(tape.softmax(scaled))
}

/// `Σ_m log softmax(logits_m)[z_m]`, shape `[B, 1]`.
pub fn categorical_log_prob<T: Scalar>(tape: &mut Tape<T>, p: &CategoricalParams, z: &[usize]) -> Result<Var> {
    if z.len() != p.batch * p.m {
        return Err(LarlError::Input(format!("expected {} indices, got {}", p.batch * p.m, z.len())));
    }
    if let Some(&bad) = z.iter().find(|&&i| i >= p.k) {
        return Err(LarlError::Input(format!("latent index {bad} out of range for K={}", p.k)));
    }
    let lp = tape.log_softmax(p.logits);
    let picked = tape.gather(lp, z)?;
    let per = tape.reshape(picked, vec![p.batch, p.m])?;
    Ok(tape.sum_last(per))
}

/// `Σ_m KL(q_m || p_m)`, shape `[B, 1]`; `p = None` is uniform over K.
pub fn categorical_kl<T: Scalar>(tape: &mut Tape<T>, q: &CategoricalParams, p: Option<&CategoricalParams>) -> Result<Var> {
    let probs = tape.softmax(q.logits);
    let lq = tape.log_softmax(q.logits);
    let rows = q.batch * q.m;
    let per = match p {
        None => {
            let plogq = tape.mul(probs, lq)?;
            let s = tape.sum_last(plogq);
            let c = tape.constant(Tensor::full(&[rows, 1], T::lit((q.k as f64).ln())));
            tape.add(s, c)?
        }
        Some(p) => {
            let lp = tape.log_softmax(p.logits);
            let d = tape.sub(lq, lp)?;
            let w = tape.mul(probs, d)?;
            tape.sum_last(w)
        }
    };
    let per = tape.reshape(per, vec![q.batch, q.m])?;
    Ok(tape.sum_last(per))
}

/// Per-variable embedding tables `E_m`, each `[K, D]`.
#[derive(Clone, Debug)]
pub struct LatentEmbeddings {
    pub tables: Vec<ParamId>,
    pub k: usize,
    pub d: usize,
}

impl LatentEmbeddings {
    pub fn m(&self) -> usize {
        self.tables.len()
    }

    /// `E_m(z_m)` for every m, each `[B, D]`.
    pub fn rows<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: &LatentSample, batch: usize) -> Result<Vec<Var>> {
        let m = self.m();
        let mut out = Vec::with_capacity(m);
        for (j, &t) in self.tables.iter().enumerate() {
            let table = tape.param(store, t);
            let row = match z {
                LatentSample::Categorical(idx) => {
                    if idx.len() != batch * m {
                        return Err(LarlError::Input(format!("expected {} indices, got {}", batch * m, idx.len())));
                    }
                    let ids: Vec<usize> = (0..batch).map(|b| idx[b * m + j]).collect();
                    tape.embedding(table, &ids)?
                }
                LatentSample::Relaxed { rows, .. } => {
                    let ids: Vec<usize> = (0..batch).map(|b| b * m + j).collect();
                    let r = tape.embedding(*rows, &ids)?;
                    tape.matmul(r, table)?
                }
                LatentSample::Gaussian(_) => {
                    return Err(LarlError::Input("latent embeddings need a categorical sample".into()))
                }
            };
            out.push(row);
        }
        Ok(out)
    }
}

/// `Σ_m E_m(z_m)`, shape `[B, D]`.
pub fn fuse_summation<T: Scalar>(tape: &mut Tape<T>, rows: &[Var]) -> Result<Var> {
    let (first, rest) = rows
        .split_first()
        .ok_or_else(|| LarlError::Input("no latent rows to fuse".into()))?;
    let mut acc = *first;
    for &r in rest {
        acc = tape.add(acc, r)?;
    }
    Ok(acc)
}

/// Weights of the per-step attention over latent embeddings.
#[derive(Clone, Debug)]
pub struct AttentionFusion {
    /// `W_a`, `[H, D]`
    pub wa: ParamId,
    /// `W_s`, `[H + D, H]`
    pub ws: ParamId,
}

/// One attention step: context `c`, attended state `h̃` and weights `α`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionStep {
    pub context: Var,
    pub attended: Var,
    pub weights: Var,
}

impl AttentionFusion {
    /// `α_m = softmax_m(hᵀ W_a E_m)`, `c = Σ_m α_m E_m`,
    /// `h̃ = tanh(W_s [h; c])`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var, rows: &[Var]) -> Result<AttentionStep> {
        let wa = tape.param(store, self.wa);
        let ws = tape.param(store, self.ws);
        let hw = tape.matmul(h, wa)?;
        let mut scores = Vec::with_capacity(rows.len());
        for &e in rows {
            let prod = tape.mul(hw, e)?;
            scores.push(tape.sum_last(prod));
        }
        let scores = tape.concat(&scores, 1)?;
        let weights = tape.softmax(scores);
        let mut context = None;
        for (j, &e) in rows.iter().enumerate() {
            let a = tape.slice(weights, 1, j, 1)?;
            let part = tape.mul_col(e, a)?;
            context = Some(match context {
                None => part,
                Some(c) => tape.add(c, part)?,
            });
        }
        let context = context.ok_or_else(|| LarlError::Input("no latent rows to attend".into()))?;
        let hc = tape.concat(&[h, context], 1)?;
        let pre = tape.matmul(hc, ws)?;
        let attended = tape.tanh(pre);
        Ok(AttentionStep {
            context,
            attended,
            weights,
        })
    }
}
