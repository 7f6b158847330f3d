//! Logit mixing, worst-case logits and the abstention rule.

use crate::math::sigmoid;

/// Weight on the image side for class `j`; a single entry broadcasts.
#[inline]
pub fn image_weight(m: &[f64], j: usize) -> f64 {
    sigmoid(if m.len() == 1 { m[0] } else { m[j] })
}

/// `σ(m_j)·y_img_j + (1 − σ(m_j))·y_gen_j`, exact when either weight is 0.
pub fn mix_logits(y_img: &[f64], y_gen: &[f64], m: &[f64]) -> Vec<f64> {
    assert_eq!(y_img.len(), y_gen.len(), "logit vectors must have equal length");
    y_img
        .iter()
        .zip(y_gen)
        .enumerate()
        .map(|(j, (&a, &b))| {
            let s = image_weight(m, j);
            if s == 1.0 {
                a
            } else if s == 0.0 {
                b
            } else {
                s * a + (1.0 - s) * b
            }
        })
        .collect()
}

/// Most adversarial mixed logits inside the band: class `k` lowered by
/// `δ_k`, every other class raised by `δ_j`.
pub fn worst_case_logits(y_img: &[f64], y_hat: &[f64], delta: &[f64], m: &[f64], k: usize) -> Vec<f64> {
    y_img
        .iter()
        .zip(y_hat)
        .enumerate()
        .map(|(j, (&a, &b))| {
            let s = image_weight(m, j);
            if s == 1.0 {
                return a;
            }
            let d = if delta.len() == 1 { delta[0] } else { delta[j] };
            let shifted = if j == k { b - d } else { b + d };
            s * a + (1.0 - s) * shifted
        })
        .collect()
}

/// True when `ỹ_k` strictly exceeds every other entry. Ties query genetics.
pub fn abstention_decision(worst: &[f64], k: usize) -> bool {
    worst.iter().enumerate().all(|(j, &v)| j == k || worst[k] > v)
}

/// `min_{j≠k} (ỹ_k − ỹ_j)`; `+∞` for a single class.
pub fn worst_case_margin(worst: &[f64], k: usize) -> f64 {
    worst
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &v)| worst[k] - v)
        .fold(f64::INFINITY, f64::min)
}
