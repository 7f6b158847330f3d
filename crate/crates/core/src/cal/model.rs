//! The CAL model: two frozen ProtoPNets, the modality weights and the
//! genetic-logit predictor, plus forward passes, decisions and checkpoints.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::band::{calibrate, BandMode, ConformalBand};
use super::decision::Decision;
use super::logits::{abstention_decision, image_weight, mix_logits, worst_case_logits, worst_case_margin};
use crate::container::Checkpoint;
use crate::data::{GeneticAccess, Modality, Sample};
use crate::error::{Error, Result};
use crate::math::argmax;
use crate::proto::similarity::pooled_similarities;
use crate::proto::{LinearHead, Patches};
use crate::protopnet::{embed_protopnet, protopnet_from_checkpoint, ProtoPNet};

/// Which prediction the band is centred on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    /// argmax of the mixture of image logits and predicted genetic logits.
    #[default]
    Mixed,
    /// argmax of the image logits alone.
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalModel {
    pub image: ProtoPNet,
    pub genetic: ProtoPNet,
    /// ĥ, same shape as the image head.
    pub predictor: LinearHead,
    /// Per-class image weights before the sigmoid, or one shared entry.
    pub m: Vec<f64>,
    pub k_rule: KRule,
}

/// Frozen pooled similarities for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CalFeatures {
    pub sample_id: u64,
    pub label: usize,
    pub s_img: Vec<f64>,
    pub s_gen: Option<Vec<f64>>,
}

/// Logits for one sample; `y_gen` is present only when genetics were read.
#[derive(Debug, Clone, PartialEq)]
pub struct CalOutputs {
    pub sample_id: u64,
    pub label: usize,
    pub y_img: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub y_gen: Option<Vec<f64>>,
}

/// The image-side part of a decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSide {
    pub k: usize,
    pub worst: Vec<f64>,
    pub abstain: bool,
}

impl CalModel {
    /// Starts from two trained ProtoPNets with ĥ copied from the image head.
    pub fn new(image: ProtoPNet, genetic: ProtoPNet, m_init: f64, scalar_m: bool, k_rule: KRule) -> Result<Self> {
        if image.modality != Modality::Image || genetic.modality != Modality::Genetic {
            return Err(Error::InvalidArgument("CAL needs an image and a genetic ProtoPNet".into()));
        }
        if image.k != genetic.k {
            return Err(Error::DimensionMismatch {
                what: "class count of the two ProtoPNets".into(),
                expected: image.k.to_string(),
                found: genetic.k.to_string(),
            });
        }
        if !m_init.is_finite() {
            return Err(Error::InvalidArgument("initial modality weight must be finite".into()));
        }
        let k = image.k;
        Ok(Self {
            predictor: image.head.clone(),
            m: vec![m_init; if scalar_m { 1 } else { k }],
            image,
            genetic,
            k_rule,
        })
    }

    pub fn k(&self) -> usize {
        self.image.k
    }

    /// σ(m_j) for every class.
    pub fn image_weights(&self) -> Vec<f64> {
        (0..self.k()).map(|j| image_weight(&self.m, j)).collect()
    }

    pub fn image_similarities(&self, sample: &Sample) -> Result<Vec<f64>> {
        Ok(pooled_similarities(&Patches::new(&sample.image), &self.image.protos)?.values)
    }

    pub fn genetic_similarities(&self, genetic: &crate::data::EmbeddingMap) -> Result<Vec<f64>> {
        Ok(pooled_similarities(&Patches::new(genetic), &self.genetic.protos)?.values)
    }

    /// Similarities for training and calibration, where genetics are
    /// always read.
    pub fn features(&self, samples: &[&Sample]) -> Result<Vec<CalFeatures>> {
        samples
            .par_iter()
            .map(|s| {
                let g = s.genetic.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("sample {} has no genetic embedding", s.id))
                })?;
                Ok(CalFeatures {
                    sample_id: s.id,
                    label: s.label,
                    s_img: self.image_similarities(s)?,
                    s_gen: Some(self.genetic_similarities(g)?),
                })
            })
            .collect()
    }

    pub fn outputs(&self, f: &CalFeatures) -> Result<CalOutputs> {
        Ok(CalOutputs {
            sample_id: f.sample_id,
            label: f.label,
            y_img: self.image.head.forward(&f.s_img)?,
            y_hat: self.predictor.forward(&f.s_img)?,
            y_gen: f.s_gen.as_ref().map(|s| self.genetic.head.forward(s)).transpose()?,
        })
    }

    pub fn all_outputs(&self, features: &[CalFeatures]) -> Result<Vec<CalOutputs>> {
        features.par_iter().map(|f| self.outputs(f)).collect()
    }

    pub fn predicted_class(&self, y_img: &[f64], y_hat: &[f64]) -> usize {
        match self.k_rule {
            KRule::Mixed => argmax(&mix_logits(y_img, y_hat, &self.m)),
            KRule::Image => argmax(y_img),
        }
    }

    pub fn image_side(&self, y_img: &[f64], y_hat: &[f64], band: &ConformalBand) -> ImageSide {
        let k = self.predicted_class(y_img, y_hat);
        let worst = worst_case_logits(y_img, y_hat, &band.delta, &self.m, k);
        let abstain = abstention_decision(&worst, k);
        ImageSide { k, worst, abstain }
    }

    /// A decision from precomputed logits. Genetic logits count as queried
    /// only for samples that do not abstain.
    pub fn decide(&self, out: &CalOutputs, band: &ConformalBand) -> Result<Decision> {
        let side = self.image_side(&out.y_img, &out.y_hat, band);
        let final_class = if side.abstain {
            side.k
        } else {
            let y_gen = out.y_gen.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("sample {} needs genetic logits", out.sample_id))
            })?;
            argmax(&mix_logits(&out.y_img, y_gen, &self.m))
        };
        Ok(Decision {
            sample_id: out.sample_id,
            true_class: Some(out.label),
            image_logits: out.y_img.clone(),
            predicted_genetic_logits: out.y_hat.clone(),
            k: side.k,
            margin: worst_case_margin(&side.worst, side.k),
            worst_case: side.worst,
            abstain: side.abstain,
            genetic_queried: !side.abstain,
            final_class,
        })
    }

    /// Residuals `y_gen − ĥ(s_img)` on calibration features.
    pub fn residuals(&self, features: &[CalFeatures]) -> Result<Vec<Vec<f64>>> {
        features
            .par_iter()
            .map(|f| {
                let o = self.outputs(f)?;
                let y_gen = o.y_gen.ok_or_else(|| {
                    Error::InvalidArgument(format!("calibration sample {} lacks genetics", f.sample_id))
                })?;
                Ok(y_gen.iter().zip(&o.y_hat).map(|(g, h)| g - h).collect())
            })
            .collect()
    }

    pub fn calibrate(&self, features: &[CalFeatures], alpha: f64, mode: BandMode, bonferroni: bool) -> Result<ConformalBand> {
        calibrate(&self.residuals(features)?, alpha, mode, bonferroni)
    }
}

/// Runs CAL on one sample, reading genetics only when the image side
/// cannot rule out a different class.
pub fn infer_cal(model: &CalModel, band: &ConformalBand, sample: &Sample, access: &GeneticAccess) -> Result<Decision> {
    let s_img = model.image_similarities(sample)?;
    let y_img = model.image.head.forward(&s_img)?;
    let y_hat = model.predictor.forward(&s_img)?;
    let side = model.image_side(&y_img, &y_hat, band);
    let mut decision = Decision {
        sample_id: sample.id,
        true_class: Some(sample.label),
        image_logits: y_img,
        predicted_genetic_logits: y_hat,
        k: side.k,
        margin: worst_case_margin(&side.worst, side.k),
        worst_case: side.worst,
        abstain: side.abstain,
        genetic_queried: false,
        final_class: side.k,
    };
    if decision.abstain {
        return Ok(decision);
    }
    let Some(g) = access.measure(sample) else {
        return Err(Error::MeasurementRequired(Box::new(decision)));
    };
    let y_gen = model.genetic.head.forward(&model.genetic_similarities(g)?)?;
    decision.genetic_queried = true;
    decision.final_class = argmax(&mix_logits(&decision.image_logits, &y_gen, &model.m));
    Ok(decision)
}

/// A unimodal ProtoPNet seen through the same decision record: image models
/// never query genetics, genetic models always do.
pub fn infer_unimodal(model: &ProtoPNet, sample: &Sample, access: &GeneticAccess) -> Result<Decision> {
    let logits = match model.modality {
        Modality::Image => model.sample_logits(sample)?,
        Modality::Genetic => {
            let Some(g) = access.measure(sample) else {
                return Err(Error::MeasurementRequired(Box::new(Decision {
                    sample_id: sample.id,
                    true_class: Some(sample.label),
                    image_logits: Vec::new(),
                    predicted_genetic_logits: Vec::new(),
                    k: 0,
                    worst_case: Vec::new(),
                    margin: f64::NAN,
                    abstain: false,
                    genetic_queried: false,
                    final_class: 0,
                })));
            };
            model.logits(&Patches::new(g))?
        }
    };
    let k = argmax(&logits);
    let image = model.modality == Modality::Image;
    Ok(Decision {
        sample_id: sample.id,
        true_class: Some(sample.label),
        image_logits: if image { logits.clone() } else { Vec::new() },
        predicted_genetic_logits: Vec::new(),
        k,
        worst_case: logits,
        margin: f64::NAN,
        abstain: image,
        genetic_queried: !image,
        final_class: k,
    })
}

pub fn cal_checkpoint(model: &CalModel) -> Checkpoint {
    let mut ck = Checkpoint::new();
    embed_protopnet(&mut ck, &model.image, "image");
    embed_protopnet(&mut ck, &model.genetic, "genetic");
    ck.put_f64("predictor.weights", vec![model.predictor.k, model.predictor.p], model.predictor.weights.clone());
    ck.put_f64("m", vec![model.m.len()], model.m.clone());
    ck.put_meta(&json!({
        "kind": "cal",
        "k": model.k(),
        "k_rule": model.k_rule,
        "scalar_m": model.m.len() == 1,
        "image_weights": model.image_weights(),
    }));
    ck
}

pub fn cal_from_checkpoint(ck: &Checkpoint) -> Result<CalModel> {
    let meta = ck.meta()?;
    if meta["kind"] != "cal" {
        return Err(Error::InvalidArgument("checkpoint is not a CAL model".into()));
    }
    let image = protopnet_from_checkpoint(ck, "image")?;
    let genetic = protopnet_from_checkpoint(ck, "genetic")?;
    let shape = ck.shape("predictor.weights")?;
    let predictor = LinearHead {
        k: shape[0],
        p: shape[1],
        weights: ck.f64("predictor.weights")?.to_vec(),
        bias: None,
    };
    let k_rule = serde_json::from_value(meta["k_rule"].clone())?;
    Ok(CalModel {
        image,
        genetic,
        predictor,
        m: ck.f64("m")?.to_vec(),
        k_rule,
    })
}

pub fn save_cal(model: &CalModel, path: &Path) -> Result<()> {
    cal_checkpoint(model).save(path)
}

pub fn load_cal(path: &Path) -> Result<CalModel> {
    cal_from_checkpoint(&Checkpoint::load(path)?)
}
