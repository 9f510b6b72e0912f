//! Frame-level ranking metrics.

use crate::error::{Error, Result};

fn check(scores: &[f64], truth: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} scores for {} truth values",
            scores.len(),
            truth.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "metric scores" });
    }
    if truth.iter().any(|&t| t > 1) {
        return Err(Error::contract("truth must be 0/1"));
    }
    let pos = truth.iter().filter(|&&t| t == 1).count();
    let neg = truth.len() - pos;
    if pos == 0 {
        return Err(Error::UndefinedMetric("no positive frames"));
    }
    if neg == 0 {
        return Err(Error::UndefinedMetric("no negative frames"));
    }
    Ok((pos, neg))
}

/// Indices ordered by descending score; equal scores keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    idx
}

/// Area under the ROC curve: the Mann-Whitney statistic with midranks for
/// ties, so a tied positive/negative pair counts one half.
pub fn frame_auc(scores: &[f64], truth: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, truth)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let hits = idx[i..j].iter().filter(|&&k| truth[k] == 1).count();
        rank_sum += mid * hits as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: mean over positives of the precision at their
/// position in the descending order (ties broken by input order).
pub fn frame_ap(scores: &[f64], truth: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, truth)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in descending(scores).iter().enumerate() {
        if truth[k] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}
