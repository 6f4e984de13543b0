use larl_tensor::{Optimizer, Scalar, Tape};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::log::{LogRecord, TrainLog};
use super::losses::{sl_loss, LossReport};
use super::TrainConfig;
use crate::corpus::EncodedSample;
use crate::error::{LarlError, Result};
use crate::model::DialogModel;
use crate::rng::Rng;

/// One supervised update in train mode.
pub fn sl_step<T: Scalar>(
    model: &mut DialogModel<T>,
    optimizer: &mut Optimizer<T>,
    batch: &[EncodedSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossReport> {
    let mut tape = Tape::with_grad();
    tape.set_train(true);
    let loss = sl_loss(model, &mut tape, batch, cfg, rng)?;
    if !loss.report.total.is_finite() {
        return Err(LarlError::Input(format!("non-finite loss {}", loss.report.total)));
    }
    let mut grads = tape.backward(loss.total)?.into_params();
    let ids = model.all_params();
    grads.zero_fill(&model.store, ids.iter().copied());
    optimizer.step(&mut model.store, &ids, &grads)?;
    Ok(loss.report)
}

/// Eval-mode loss over `samples`: reconstruction weighted by tokens, KL by
/// examples.
pub fn evaluate_loss<T: Scalar>(model: &DialogModel<T>, samples: &[EncodedSample], cfg: &TrainConfig, rng: &mut Rng) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(LarlError::Input("no samples to evaluate".into()));
    }
    let (mut nll, mut kl, mut tokens) = (0.0, 0.0, 0usize);
    let mut weight = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let mut tape = Tape::no_grad();
        let r = sl_loss(model, &mut tape, chunk, cfg, rng)?;
        nll += r.report.reconstruction * r.report.tokens as f64;
        kl += r.report.kl * chunk.len() as f64;
        tokens += r.report.tokens;
        weight = r.report.kl_weight;
    }
    let reconstruction = nll / tokens as f64;
    let kl = kl / samples.len() as f64;
    Ok(LossReport {
        reconstruction,
        kl,
        kl_weight: weight,
        total: reconstruction + weight * kl,
        tokens,
        ppl: reconstruction.exp(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub steps: u64,
    pub best_epoch: usize,
    pub best_valid: LossReport,
    pub valid_history: Vec<LossReport>,
}

/// Supervised pre-training; the parameters of the epoch with the lowest
/// validation loss are kept.
pub fn pretrain<T: Scalar>(
    model: &mut DialogModel<T>,
    train: &[EncodedSample],
    valid: &[EncodedSample],
    cfg: &TrainConfig,
    rng: &mut Rng,
    log: &mut TrainLog,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(LarlError::Input("pre-training needs train and validation samples".into()));
    }
    let mut opt = Optimizer::adam(cfg.sl_lr, cfg.sl_clip)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, LossReport, larl_tensor::ParamStore<T>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedSample> = idx.iter().map(|&i| train[i].clone()).collect();
            let r = sl_step(model, &mut opt, &batch, cfg, rng)?;
            step += 1;
            log.write(&LogRecord {
                step,
                kind: "sl".into(),
                epoch: Some(epoch),
                reconstruction: Some(r.reconstruction),
                kl: Some(r.kl),
                total: Some(r.total),
                ppl: Some(r.ppl),
                ..Default::default()
            })?;
        }
        let v = evaluate_loss(model, valid, cfg, rng)?;
        log.write(&LogRecord {
            step,
            kind: "valid".into(),
            epoch: Some(epoch),
            reconstruction: Some(v.reconstruction),
            kl: Some(v.kl),
            total: Some(v.total),
            ppl: Some(v.ppl),
            ..Default::default()
        })?;
        if best.as_ref().is_none_or(|(_, b, _)| v.total < b.total) {
            best = Some((epoch, v.clone(), model.store.clone()));
        }
        history.push(v);
    }
    log.flush()?;
    let (best_epoch, best_valid, store) = best.ok_or_else(|| LarlError::Config("epochs must be positive".into()))?;
    model.store = store;
    Ok(PretrainReport {
        epochs: cfg.epochs,
        steps: step,
        best_epoch,
        best_valid,
        valid_history: history,
    })
}
