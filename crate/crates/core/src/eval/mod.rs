//! Metrics and test-set evaluation.

pub mod lcr;
pub mod ppl;
pub mod report;
pub mod text;

pub use lcr::{lcr_curve, log_spaced_budgets, write_lcr_csv, CheckpointMetric, LcrPoint, CSV_HEADER, DEFAULT_BUDGETS};
pub use ppl::{log_mean_exp, mc_log_likelihoods, mc_perplexity, PplForm, Perplexity};
pub use report::{
    evaluate_negotiation, evaluate_slotfill, negotiation_stats, slotfill_stats, EvalConfig, EvalReport, TaskKind,
};
pub use text::{corpus_bleu, diversity};
