use crate::error::{AirdError, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// `c_k = exp(s_k / tau) / sum_j exp(s_j / tau)`, computed after subtracting the max score.
pub fn softmax_temperature(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(AirdError::config(format!(
            "temperature must lie in (0, 1], got {tau}"
        )));
    }
    if scores.is_empty() {
        return Err(AirdError::config("softmax over an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(AirdError::config("non-finite score"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / total).collect())
}

/// Gradient with respect to the scores given `c` and `d loss / d c`.
pub fn softmax_temperature_backward(c: &[f64], grad_c: &[f64], tau: f64) -> Vec<f64> {
    let mean: f64 = c.iter().zip(grad_c).map(|(a, b)| a * b).sum();
    c.iter()
        .zip(grad_c)
        .map(|(&ck, &gk)| ck * (gk - mean) / tau)
        .collect()
}

/// Binary cross-entropy `-[t log p + (1 - t) log(1 - p)]` and its derivative in `p`.
pub fn bce_terms(p: f64, target: f64) -> (f64, f64) {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    let grad = -target / p + (1.0 - target) / (1.0 - p);
    (loss, grad)
}
