//! Surface metrics over generated token sequences.

use std::collections::{HashMap, HashSet};

use crate::corpus::detokenize;
use crate::error::{LarlError, Result};

/// Number of distinct responses after detokenization.
pub fn diversity<S: AsRef<str>>(responses: &[Vec<S>]) -> usize {
    responses.iter().map(|r| detokenize(r)).collect::<HashSet<_>>().len()
}

const MAX_N: usize = 4;

fn ngrams<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    for w in toks.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    out
}

/// Corpus BLEU-4 against one reference per candidate: clipped n-gram
/// precisions pooled over the corpus, uniform weights, brevity penalty.
/// A higher order (n ≥ 2) with no match uses `1 / (total + 1)`; no unigram
/// match scores 0.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<R>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(LarlError::Input(format!(
            "bleu needs aligned lists, got {} candidates and {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=MAX_N {
            let cand = ngrams(c, n);
            let refs = ngrams(r, n);
            total[n - 1] += cand.values().sum::<usize>();
            matched[n - 1] += cand
                .iter()
                .map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if c_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| {
            if matched[i] > 0 {
                (matched[i] as f64 / total[i] as f64).ln()
            } else {
                -((total[i] + 1) as f64).ln()
            }
        })
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}
