use crate::error::{AirdError, Result};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Rank-based area under the ROC curve; `labels[i]` marks a positive.
///
/// Tied scores receive their average rank, which gives half credit to tied pairs.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(AirdError::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(AirdError::SingleClass);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(AirdError::config("AUC of NaN scores is undefined"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps every midrank an integer.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        for &o in &order[i..=j] {
            if labels[o] {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let p = pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// F1 of `positive` as the positive class; 0 when nothing is predicted or truly positive.
pub fn f1(preds: &[bool], labels: &[bool], positive: bool) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn accuracy(preds: &[bool], labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Predictions of the rule `score > threshold`.
pub fn predict(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

/// Candidate thresholds: one below every score, the midpoints between
/// adjacent distinct sorted scores, and one above every score, ascending.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len() + 1);
    if let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) {
        out.push(lo - 1.0);
        out.extend(sorted.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        out.push(hi + 1.0);
    }
    out
}

/// Threshold maximizing the accuracy of `score > t`; ties go to the lowest threshold.
pub fn tune_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(AirdError::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(AirdError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let candidates = threshold_candidates(scores);
    // Below every score all predictions are positive.
    let mut correct = pos;
    let mut best = (correct, candidates[0]);
    let mut i = 0;
    for &t in &candidates[1..] {
        while i < order.len() && scores[order[i]] < t {
            correct = if labels[order[i]] { correct - 1 } else { correct + 1 };
            i += 1;
        }
        if correct > best.0 {
            best = (correct, t);
        }
    }
    Ok(best.1)
}

/// Relevance flags of one ranked retrieval plus how many relevant items exist overall.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalRun {
    pub relevant: Vec<bool>,
    pub total_relevant: usize,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(AirdError::config("K must be at least 1"));
    }
    Ok(())
}

pub fn precision_at_k(runs: &[RetrievalRun], k: usize) -> Result<f64> {
    check_k(k)?;
    if runs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = runs
        .iter()
        .map(|r| r.relevant.iter().take(k).filter(|&&x| x).count() as f64 / k as f64)
        .sum();
    Ok(sum / runs.len() as f64)
}

/// Mean over runs of `sum_{r <= K} P@r rel(r) / min(K, total relevant)`.
pub fn map_at_k(runs: &[RetrievalRun], k: usize) -> Result<f64> {
    check_k(k)?;
    if runs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = runs.iter().map(|r| average_precision(r, k)).sum();
    Ok(sum / runs.len() as f64)
}

fn average_precision(run: &RetrievalRun, k: usize) -> f64 {
    let denom = k.min(run.total_relevant);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in run.relevant.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / denom as f64
}
