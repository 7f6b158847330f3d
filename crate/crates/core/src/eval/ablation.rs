//! Two-by-two loss ablations for CAL and ALP.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate_alp, evaluate_cal};
use crate::cal::{train_cal, CalConfig};
use crate::data::{GeneticAccess, Sample};
use crate::error::Result;
use crate::protopnet::ProtoPNet;
use crate::tree::{train_alp, AlpConfig, ProtoTree};

/// `(label, margin on, modality on)`.
pub const CAL_ABLATION_CELLS: [(&str, bool, bool); 4] = [
    ("Mar. + Mod. Loss", true, true),
    ("Mar. Loss", true, false),
    ("Mod. Loss", false, true),
    ("Neither Loss", false, false),
];

/// `(label, variability on, routing on)`.
pub const ALP_ABLATION_CELLS: [(&str, bool, bool); 4] = [
    ("Var. + Rout. Loss", true, true),
    ("Var. Loss", true, false),
    ("Rout. Loss", false, true),
    ("Neither Loss", false, false),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub balanced_accuracy: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub label: String,
    pub seeds: usize,
    pub mean_balanced_accuracy: f64,
    pub mean_success_rate: f64,
}

/// One CAL per cell; switched-off terms get weight 0, the rest keep the
/// weights in `base`.
pub fn cal_ablation(
    image: &ProtoPNet,
    genetic: &ProtoPNet,
    train: &[&Sample],
    calibration: &[&Sample],
    test: &[&Sample],
    base: &CalConfig,
    alpha: f64,
) -> Result<Vec<AblationRow>> {
    CAL_ABLATION_CELLS
        .iter()
        .map(|&(label, margin, modality)| {
            let cfg = CalConfig {
                lambda_margin: if margin { base.lambda_margin } else { 0.0 },
                lambda_modality: if modality { base.lambda_modality } else { 0.0 },
                ..base.clone()
            };
            let (model, _) = train_cal(image, genetic, train, calibration, &cfg)?;
            let band = model.calibrate(&model.features(calibration)?, alpha, cfg.band_mode, cfg.bonferroni)?;
            let (report, _) = evaluate_cal(&model, &band, test, &GeneticAccess::new())?;
            Ok(AblationRow {
                label: label.to_string(),
                seed: base.seed,
                balanced_accuracy: report.balanced_accuracy,
                success_rate: report.success_rate,
            })
        })
        .collect()
}

pub fn alp_ablation(
    image: &ProtoTree,
    genetic: &ProtoTree,
    train: &[&Sample],
    test: &[&Sample],
    base: &AlpConfig,
) -> Result<Vec<AblationRow>> {
    ALP_ABLATION_CELLS
        .iter()
        .map(|&(label, var, routing)| {
            let cfg = AlpConfig {
                lambda_var: if var { base.lambda_var } else { 0.0 },
                lambda_routing: if routing { base.lambda_routing } else { 0.0 },
                ..base.clone()
            };
            let (model, _) = train_alp(image, genetic, train, &cfg)?;
            let (report, _) = evaluate_alp(&model, test, &GeneticAccess::new())?;
            Ok(AblationRow {
                label: label.to_string(),
                seed: base.seed,
                balanced_accuracy: report.balanced_accuracy,
                success_rate: report.success_rate,
            })
        })
        .collect()
}

/// Seed-averaged cells in order of first appearance.
pub fn ablation_summary(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.label.clone()).or_insert_with(|| {
            order.push(r.label.clone());
            (0, 0.0, 0.0)
        });
        e.0 += 1;
        e.1 += r.balanced_accuracy;
        e.2 += r.success_rate;
    }
    order
        .into_iter()
        .map(|label| {
            let (n, a, s) = acc[&label];
            AblationSummary {
                label,
                seeds: n,
                mean_balanced_accuracy: a / n as f64,
                mean_success_rate: s / n as f64,
            }
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("label,seed,balanced_accuracy,success_rate\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.label, r.seed, r.balanced_accuracy, r.success_rate);
    }
    s
}
