//! CAL loss terms with their gradients.

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, sigmoid, sigmoid_prime};

/// `log Σ_{j≠k} exp(ỹ_j − ỹ_k)` and its gradient with respect to `ỹ`.
pub fn margin_loss(worst: &[f64], k: usize) -> Result<(f64, Vec<f64>)> {
    if worst.len() < 2 {
        return Err(Error::InvalidArgument("margin loss needs at least two classes".into()));
    }
    let others: Vec<f64> = worst
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &v)| v - worst[k])
        .collect();
    let loss = log_sum_exp(&others);
    let mut grad = vec![0.0; worst.len()];
    for (j, &v) in worst.iter().enumerate() {
        if j != k {
            grad[j] = (v - worst[k] - loss).exp();
        }
    }
    grad[k] = -1.0;
    Ok((loss, grad))
}

/// `−Σ_j σ(m_j)` and its gradient.
pub fn modality_loss(m: &[f64]) -> (f64, Vec<f64>) {
    let loss = -m.iter().map(|&x| sigmoid(x)).sum::<f64>();
    (loss, m.iter().map(|&x| -sigmoid_prime(x)).collect())
}

/// Mean squared error over classes and its gradient with respect to the
/// prediction (the target gradient is its negation).
pub fn predictor_loss(target: &[f64], prediction: &[f64]) -> (f64, Vec<f64>) {
    let k = target.len() as f64;
    let diff: Vec<f64> = prediction.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / k;
    (loss, diff.iter().map(|d| 2.0 * d / k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_values() {
        let (l, _) = margin_loss(&[3.0, 0.0], 0).unwrap();
        assert!((l + 3.0).abs() < 1e-15);
        let (l, _) = margin_loss(&[1.0; 5], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(margin_loss(&[1.0], 0).is_err());
    }

    #[test]
    fn modality_values() {
        let (l, g) = modality_loss(&vec![0.0; 516]);
        assert_eq!(l, -258.0);
        assert!(g.iter().all(|&x| x == -0.25));
        let (l, _) = modality_loss(&[f64::INFINITY; 4]);
        assert_eq!(l, -4.0);
    }

    #[test]
    fn predictor_values() {
        assert_eq!(predictor_loss(&[1.0, 2.0], &[1.0, 2.0]).0, 0.0);
        let (l, _) = predictor_loss(&[1.0, -2.0, 0.5], &[1.5, -1.5, 1.0]);
        assert!((l - 0.25).abs() < 1e-15);
    }
}
