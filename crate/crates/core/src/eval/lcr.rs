//! The language-constrained reward curve: the best reward reached by any
//! checkpoint whose perplexity stays under a budget.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LarlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetric {
    pub index: usize,
    pub ppl: f64,
    pub reward: f64,
    /// Training step the checkpoint was taken at.
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcrPoint {
    pub budget: f64,
    /// `None` when no checkpoint is under budget.
    pub best_reward: Option<f64>,
}

pub const CSV_HEADER: &str = "budget_ppl,best_reward";
pub const DEFAULT_BUDGETS: usize = 40;

/// `y(x) = max { R_i : p_i < x }` for each budget `x`.
pub fn lcr_curve(metrics: &[CheckpointMetric], budgets: &[f64]) -> Result<Vec<LcrPoint>> {
    if metrics.is_empty() {
        return Err(LarlError::Input("lcr curve needs at least one checkpoint".into()));
    }
    Ok(budgets
        .iter()
        .map(|&x| LcrPoint {
            budget: x,
            best_reward: metrics
                .iter()
                .filter(|m| m.ppl < x)
                .map(|m| m.reward)
                .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r)))),
        })
        .collect())
}

/// `n` log-spaced budgets from `0.9 · min p_i` to `1.5 · max p_i`.
pub fn log_spaced_budgets(metrics: &[CheckpointMetric], n: usize) -> Result<Vec<f64>> {
    if metrics.is_empty() || n < 2 {
        return Err(LarlError::Input("budgets need checkpoints and at least two points".into()));
    }
    let lo = metrics.iter().map(|m| m.ppl).fold(f64::INFINITY, f64::min) * 0.9;
    let hi = metrics.iter().map(|m| m.ppl).fold(f64::NEG_INFINITY, f64::max) * 1.5;
    if !(lo > 0.0 && hi.is_finite()) {
        return Err(LarlError::Input(format!("perplexities must be positive and finite, got [{lo}, {hi}]")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect())
}

/// CSV with header; an absent reward is an empty field.
pub fn write_lcr_csv(mut w: impl Write, points: &[LcrPoint]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for p in points {
        match p.best_reward {
            Some(r) => writeln!(w, "{},{}", p.budget, r)?,
            None => writeln!(w, "{},", p.budget)?,
        }
    }
    Ok(())
}
