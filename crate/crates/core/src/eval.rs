//! Ranking metrics for imbalanced binary labels and full-catalogue
//! retrieval, plus agent pooling and rank fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::objectives::Gmm;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no positive labels")]
    NoPositives,
    #[error("need at least one positive and one negative")]
    DegenerateClass,
    #[error("empty input")]
    Empty,
    #[error("target {0} outside a ranking of {1} items")]
    BadTarget(usize, usize),
}

fn check(scores: &[f64], labels: &[bool]) -> Result<usize, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(labels.iter().filter(|&&l| l).count())
}

/// Indices by descending score, ties by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mean over positives of the precision at each positive's rank.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let pos = check(scores, labels)?;
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &i) in ranked(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// 1-based ranks in ascending score order, ties sharing their average rank.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability a positive outscores a negative, ties counting half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let pos = check(scores, labels)?;
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateClass);
    }
    let ranks = average_ranks(scores);
    let r: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((r - p * (p + 1.0) / 2.0) / (p * n))
}

/// Cumulative `(tp, fp)` after admitting each group of equal scores, from
/// the highest score down.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let order = ranked(scores);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((tp, fp));
        }
    }
    out
}

/// Best F1 over thresholds "score >= s" for every distinct score `s`.
pub fn max_f1(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let pos = check(scores, labels)?;
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok(sweep(scores, labels)
        .into_iter()
        .map(|(tp, fp)| 2.0 * tp as f64 / (tp + pos + fp) as f64)
        .fold(0.0, f64::max))
}

/// Highest sensitivity over thresholds whose specificity is at least
/// `specificity`; rejecting everything is always admissible.
pub fn sens_at_spec(scores: &[f64], labels: &[bool], specificity: f64) -> Result<f64, EvalError> {
    let pos = check(scores, labels)?;
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateClass);
    }
    Ok(sweep(scores, labels)
        .into_iter()
        .filter(|&(_, fp)| (neg - fp) as f64 / neg as f64 >= specificity)
        .map(|(tp, _)| tp as f64 / pos as f64)
        .fold(0.0, f64::max))
}

/// 1-based rank of `target`: one plus the number of items scoring strictly
/// higher or scoring equal with a smaller index.
pub fn target_rank(scores: &[f64], target: usize) -> Result<usize, EvalError> {
    let s = *scores.get(target).ok_or(EvalError::BadTarget(target, scores.len()))?;
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count())
}

pub fn hit_at_k(rankings: &[Vec<f64>], targets: &[usize], k: usize) -> Result<f64, EvalError> {
    if rankings.len() != targets.len() {
        return Err(EvalError::LengthMismatch(rankings.len(), targets.len()));
    }
    if rankings.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0;
    for (s, &t) in rankings.iter().zip(targets) {
        if target_rank(s, t)? <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / targets.len() as f64)
}

pub fn mrr(rankings: &[Vec<f64>], targets: &[usize]) -> Result<f64, EvalError> {
    if rankings.len() != targets.len() {
        return Err(EvalError::LengthMismatch(rankings.len(), targets.len()));
    }
    if rankings.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    for (s, &t) in rankings.iter().zip(targets) {
        sum += 1.0 / target_rank(s, t)? as f64;
    }
    Ok(sum / targets.len() as f64)
}

/// Mean predicted mass within one hour of the true delta.
pub fn t_pm60(mixtures: &[Gmm], deltas: &[f64]) -> Result<f64, EvalError> {
    if mixtures.len() != deltas.len() {
        return Err(EvalError::LengthMismatch(mixtures.len(), deltas.len()));
    }
    if mixtures.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(mixtures.iter().zip(deltas).map(|(m, &d)| m.mass_within(d, 1.0)).sum::<f64>() / deltas.len() as f64)
}

/// Entity-level scores and labels: max score and any-label per group,
/// in ascending group order.
pub fn pool_agent_max(scores: &[f64], labels: &[bool], groups: &[u32]) -> Result<(Vec<u32>, Vec<f64>, Vec<bool>), EvalError> {
    check(scores, labels)?;
    if groups.len() != scores.len() {
        return Err(EvalError::LengthMismatch(groups.len(), scores.len()));
    }
    let mut agg: BTreeMap<u32, (f64, bool)> = BTreeMap::new();
    for ((&s, &l), &g) in scores.iter().zip(labels).zip(groups) {
        let e = agg.entry(g).or_insert((f64::NEG_INFINITY, false));
        e.0 = e.0.max(s);
        e.1 |= l;
    }
    let keys = agg.keys().copied().collect();
    let (s, l) = agg.into_values().unzip();
    Ok((keys, s, l))
}

/// Average ranks mapped to `[0, 1]` as `(r - 1) / (n - 1)`; a single item
/// maps to 0.
pub fn normalized_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    average_ranks(scores).into_iter().map(|r| (r - 1.0) / (n - 1) as f64).collect()
}

pub fn rank_fuse(a: &[f64], b: &[f64]) -> Result<Vec<f64>, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    Ok(normalized_ranks(a).into_iter().zip(normalized_ranks(b)).map(|(x, y)| x + y).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub n: usize,
    pub positives: usize,
    pub prevalence: f64,
    pub ap: f64,
    pub auroc: f64,
    pub max_f1: f64,
    pub sens_at_90_spec: f64,
}

pub fn binary_metrics(scores: &[f64], labels: &[bool]) -> Result<BinaryMetrics, EvalError> {
    let pos = check(scores, labels)?;
    Ok(BinaryMetrics {
        n: scores.len(),
        positives: pos,
        prevalence: pos as f64 / scores.len() as f64,
        ap: average_precision(scores, labels)?,
        auroc: auroc(scores, labels)?,
        max_f1: max_f1(scores, labels)?,
        sens_at_90_spec: sens_at_spec(scores, labels, 0.9)?,
    })
}
