//! Metrics, reports, α sweeps and loss ablations.

pub mod ablation;
pub mod sweep;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cal::{infer_cal, infer_unimodal, mix_logits, CalModel, ConformalBand, Decision};
use crate::data::{GeneticAccess, Sample};
use crate::error::{Error, Result};
use crate::math::argmax;
use crate::protopnet::ProtoPNet;
use crate::tree::{infer_alp, AlpModel, AlpPrediction, ProtoTree};

pub use ablation::{
    ablation_csv, ablation_summary, alp_ablation, cal_ablation, AblationRow, AblationSummary, ALP_ABLATION_CELLS,
    CAL_ABLATION_CELLS,
};
pub use sweep::{series_tsv, sweep_alpha, sweep_csv, SweepResult, SweepRow};

/// Recall per class; `None` for classes without samples.
pub fn per_class_recall(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Option<f64>>> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "predictions vs labels".into(),
            expected: labels.len().to_string(),
            found: preds.len().to_string(),
        });
    }
    let mut hit = vec![0usize; k];
    let mut n = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, k });
        }
        n[y] += 1;
        hit[y] += (p == y) as usize;
    }
    Ok((0..k).map(|c| (n[c] > 0).then(|| hit[c] as f64 / n[c] as f64)).collect())
}

/// Mean recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("balanced accuracy of an empty set".into()));
    }
    let recalls: Vec<f64> = per_class_recall(preds, labels, k)?.into_iter().flatten().collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

pub fn raw_accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Fraction of decisions that skipped the genetic measurement.
pub fn success_rate(decisions: &[Decision]) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    decisions.iter().filter(|d| d.abstain).count() as f64 / decisions.len() as f64
}

/// Fraction of ALP paths made only of image nodes.
pub fn path_success_rate(preds: &[AlpPrediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| !p.path.genetic_used).count() as f64 / preds.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbstentionError {
    /// Wrong abstentions over abstentions (0 when nothing abstains).
    pub conditional: f64,
    /// Wrong abstentions over all samples.
    pub unconditional: f64,
    pub abstained: usize,
    pub wrong: usize,
}

/// Counts abstentions whose true mixed prediction differs from `k`.
/// `true_genetic[i]` must be present for every abstained decision.
pub fn abstention_error_rate(decisions: &[Decision], true_genetic: &[Option<Vec<f64>>], m: &[f64]) -> Result<AbstentionError> {
    let mut abstained = 0;
    let mut wrong = 0;
    for (d, g) in decisions.iter().zip(true_genetic) {
        if !d.abstain {
            continue;
        }
        let g = g.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("abstained sample {} has no audited genetic logits", d.sample_id))
        })?;
        abstained += 1;
        wrong += (argmax(&mix_logits(&d.image_logits, g, m)) != d.k) as usize;
    }
    Ok(AbstentionError {
        conditional: if abstained == 0 { 0.0 } else { wrong as f64 / abstained as f64 },
        unconditional: if decisions.is_empty() { 0.0 } else { wrong as f64 / decisions.len() as f64 },
        abstained,
        wrong,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub balanced_accuracy: f64,
    pub raw_accuracy: f64,
    pub success_rate: f64,
    pub abstention_error_rate: Option<f64>,
    pub unconditional_abstention_error_rate: Option<f64>,
    pub per_class_recall: Vec<Option<f64>>,
    /// Classes without test samples, left out of the balanced accuracy.
    pub absent_classes: Vec<usize>,
    pub alpha: Option<f64>,
    pub t: Option<f64>,
    pub tau: Option<f64>,
    pub n_samples: usize,
    /// Genetic reads that count as cost (audits excluded).
    pub genetic_measurements: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    fn from_predictions(model: &str, preds: &[usize], labels: &[usize], k: usize, success: f64) -> Result<Self> {
        let recalls = per_class_recall(preds, labels, k)?;
        Ok(Self {
            model: model.to_string(),
            balanced_accuracy: balanced_accuracy(preds, labels, k)?,
            raw_accuracy: raw_accuracy(preds, labels),
            success_rate: success,
            abstention_error_rate: None,
            unconditional_abstention_error_rate: None,
            absent_classes: (0..k).filter(|&c| recalls[c].is_none()).collect(),
            per_class_recall: recalls,
            alpha: None,
            t: None,
            tau: None,
            n_samples: labels.len(),
            genetic_measurements: 0,
            seed: 0,
            config_hash: String::new(),
        })
    }
}

/// Runs CAL inference with honest cost accounting, then audits genetics for
/// abstained samples to measure the abstention error.
pub fn evaluate_cal(
    model: &CalModel,
    band: &ConformalBand,
    samples: &[&Sample],
    access: &GeneticAccess,
) -> Result<(EvalReport, Vec<Decision>)> {
    let decisions: Vec<Decision> = samples
        .par_iter()
        .map(|s| infer_cal(model, band, s, access))
        .collect::<Result<_>>()?;
    let measured = access.measured();
    let audited: Vec<Option<Vec<f64>>> = samples
        .par_iter()
        .zip(&decisions)
        .map(|(s, d)| {
            if !d.abstain {
                return Ok(None);
            }
            let g = access
                .audit(s)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {} cannot be audited", s.id)))?;
            Ok(Some(model.genetic.head.forward(&model.genetic_similarities(g)?)?))
        })
        .collect::<Result<_>>()?;
    let err = abstention_error_rate(&decisions, &audited, &model.m)?;
    let preds: Vec<usize> = decisions.iter().map(|d| d.final_class).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut report = EvalReport::from_predictions("cal", &preds, &labels, model.k(), success_rate(&decisions))?;
    report.abstention_error_rate = Some(err.conditional);
    report.unconditional_abstention_error_rate = Some(err.unconditional);
    report.alpha = Some(band.alpha);
    report.genetic_measurements = measured;
    Ok((report, decisions))
}

pub fn evaluate_protopnet(model: &ProtoPNet, samples: &[&Sample], access: &GeneticAccess) -> Result<(EvalReport, Vec<Decision>)> {
    let decisions: Vec<Decision> = samples
        .par_iter()
        .map(|s| infer_unimodal(model, s, access))
        .collect::<Result<_>>()?;
    let preds: Vec<usize> = decisions.iter().map(|d| d.final_class).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let name = format!("protopnet_{}", model.modality.as_str());
    let mut report = EvalReport::from_predictions(&name, &preds, &labels, model.k, success_rate(&decisions))?;
    report.genetic_measurements = access.measured();
    Ok((report, decisions))
}

/// Unimodal trees: image trees never read genetics, genetic trees always do.
pub fn evaluate_prototree(model: &ProtoTree, samples: &[&Sample]) -> Result<EvalReport> {
    let preds: Vec<usize> = samples
        .par_iter()
        .map(|s| Ok(model.predict(s)?.0))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let image = model.modality == crate::data::Modality::Image;
    let name = format!("prototree_{}", model.modality.as_str());
    let mut report = EvalReport::from_predictions(&name, &preds, &labels, model.tree.k, if image { 1.0 } else { 0.0 })?;
    report.genetic_measurements = if image { 0 } else { samples.len() };
    Ok(report)
}

pub fn evaluate_alp(model: &AlpModel, samples: &[&Sample], access: &GeneticAccess) -> Result<(EvalReport, Vec<AlpPrediction>)> {
    let preds: Vec<AlpPrediction> = samples
        .par_iter()
        .map(|s| infer_alp(model, s, access))
        .collect::<Result<_>>()?;
    let classes: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut report = EvalReport::from_predictions("alp", &classes, &labels, model.tree.k, path_success_rate(&preds))?;
    report.genetic_measurements = access.measured();
    Ok((report, preds))
}
