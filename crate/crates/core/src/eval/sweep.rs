//! Accuracy, success and abstention error as functions of α.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{abstention_error_rate, balanced_accuracy, success_rate};
use crate::cal::{calibrate, BandMode, CalModel, CalOutputs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub delta: Vec<f64>,
    pub success_rate: f64,
    pub balanced_accuracy: f64,
    pub abstention_error_rate: f64,
    pub unconditional_abstention_error_rate: f64,
    pub abstained: usize,
    /// `α + 3·sqrt(α(1 − α)/n_abstained)`.
    pub error_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Every δ_j non-increasing along increasing α.
    pub delta_monotone: bool,
    /// Success rate non-decreasing along increasing α.
    pub success_monotone: bool,
}

/// Calibrates once per α on fixed calibration residuals and evaluates on
/// precomputed test logits, which must include audited genetic logits.
pub fn sweep_alpha(
    model: &CalModel,
    calibration_residuals: &[Vec<f64>],
    test: &[CalOutputs],
    alphas: &[f64],
    mode: BandMode,
    bonferroni: bool,
) -> Result<SweepResult> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("sweep needs test samples".into()));
    }
    let mut alphas = alphas.to_vec();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let labels: Vec<usize> = test.iter().map(|o| o.label).collect();
    let genetic: Vec<Option<Vec<f64>>> = test.iter().map(|o| o.y_gen.clone()).collect();
    let rows: Vec<SweepRow> = alphas
        .par_iter()
        .map(|&alpha| {
            let band = calibrate(calibration_residuals, alpha, mode, bonferroni)?;
            let decisions = test.iter().map(|o| model.decide(o, &band)).collect::<Result<Vec<_>>>()?;
            let err = abstention_error_rate(&decisions, &genetic, &model.m)?;
            let preds: Vec<usize> = decisions.iter().map(|d| d.final_class).collect();
            let sd = if err.abstained == 0 {
                0.0
            } else {
                (alpha * (1.0 - alpha) / err.abstained as f64).sqrt()
            };
            Ok(SweepRow {
                alpha,
                delta: band.delta,
                success_rate: success_rate(&decisions),
                balanced_accuracy: balanced_accuracy(&preds, &labels, model.k())?,
                abstention_error_rate: err.conditional,
                unconditional_abstention_error_rate: err.unconditional,
                abstained: err.abstained,
                error_bound: alpha + 3.0 * sd,
            })
        })
        .collect::<Result<_>>()?;
    let delta_monotone = rows
        .windows(2)
        .all(|w| w[0].delta.iter().zip(&w[1].delta).all(|(a, b)| b <= a));
    let success_monotone = rows.windows(2).all(|w| w[1].success_rate >= w[0].success_rate);
    Ok(SweepResult {
        rows,
        delta_monotone,
        success_monotone,
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "alpha,success_rate,balanced_accuracy,abstention_error_rate,unconditional_abstention_error_rate,abstained,error_bound,mean_delta\n",
    );
    for r in rows {
        let mean = r.delta.iter().sum::<f64>() / r.delta.len() as f64;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.alpha,
            r.success_rate,
            r.balanced_accuracy,
            r.abstention_error_rate,
            r.unconditional_abstention_error_rate,
            r.abstained,
            r.error_bound,
            mean
        );
    }
    s
}

/// Two-column `x<TAB>y` series for plotting.
pub fn series_tsv(points: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut s = String::new();
    for (x, y) in points {
        let _ = writeln!(s, "{x}\t{y}");
    }
    s
}
