//! CAL training: only the heads, the predictor and the modality weights move.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::band::{BandMode, ConformalBand};
use super::losses::{margin_loss, modality_loss, predictor_loss};
use super::model::{CalFeatures, CalModel, KRule};
use crate::data::{oversample_indices, Sample};
use crate::error::{Error, Result};
use crate::math::{cross_entropy, sigmoid_prime};
use crate::optim::Sgd;
use crate::protopnet::ProtoPNet;

/// Which parameter blocks receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trainable {
    pub modality: bool,
    pub image_head: bool,
    pub genetic_head: bool,
    pub predictor: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            modality: true,
            image_head: true,
            genetic_head: true,
            predictor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalConfig {
    pub lambda_modality: f64,
    pub lambda_margin: f64,
    pub lambda_predictor: f64,
    /// Confidence used for the gate during training.
    pub alpha_train: f64,
    pub band_mode: BandMode,
    pub bonferroni: bool,
    pub k_rule: KRule,
    pub scalar_m: bool,
    pub m_init: f64,
    pub lr: f64,
    pub momentum: f64,
    pub lr_step_size: usize,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub trainable: Trainable,
}

impl Default for CalConfig {
    fn default() -> Self {
        Self {
            lambda_modality: 0.02,
            lambda_margin: 0.05,
            lambda_predictor: 1.0,
            alpha_train: 0.05,
            band_mode: BandMode::PerLogit,
            bonferroni: false,
            k_rule: KRule::Mixed,
            scalar_m: false,
            m_init: 0.0,
            lr: 0.1,
            momentum: 0.9,
            lr_step_size: 10,
            lr_gamma: 0.5,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            trainable: Trainable::default(),
        }
    }
}

impl CalConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_modality, self.lambda_margin, self.lambda_predictor];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("CAL loss weights must be finite and non-negative".into()));
        }
        if !(self.alpha_train > 0.0 && self.alpha_train < 1.0) {
            return Err(Error::Config(format!("alpha_train must lie in (0, 1), got {}", self.alpha_train)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.lr_gamma > 0.0) {
            return Err(Error::Config("invalid CAL learning-rate settings".into()));
        }
        if self.batch_size == 0 || !self.m_init.is_finite() {
            return Err(Error::Config("batch_size must be positive and m_init finite".into()));
        }
        Ok(())
    }
}

/// Loss and gradients for the four trainable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CalGrad {
    pub loss: f64,
    pub d_m: Vec<f64>,
    pub d_image_head: Vec<f64>,
    pub d_genetic_head: Vec<f64>,
    pub d_predictor: Vec<f64>,
}

impl CalGrad {
    fn zeros(model: &CalModel) -> Self {
        Self {
            loss: 0.0,
            d_m: vec![0.0; model.m.len()],
            d_image_head: vec![0.0; model.image.head.weights.len()],
            d_genetic_head: vec![0.0; model.genetic.head.weights.len()],
            d_predictor: vec![0.0; model.predictor.weights.len()],
        }
    }

    fn add_scaled(&mut self, other: &CalGrad, scale: f64) {
        self.loss += scale * other.loss;
        let pairs = [
            (&mut self.d_m, &other.d_m),
            (&mut self.d_image_head, &other.d_image_head),
            (&mut self.d_genetic_head, &other.d_genetic_head),
            (&mut self.d_predictor, &other.d_predictor),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }
}

/// Gated cross-entropy, margin and predictor terms for one sample.
pub fn cal_sample_loss(model: &CalModel, band: &ConformalBand, f: &CalFeatures, cfg: &CalConfig) -> Result<CalGrad> {
    let s_gen = f
        .s_gen
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("training sample {} lacks genetics", f.sample_id)))?;
    let out = model.outputs(f)?;
    let y_gen = out.y_gen.as_ref().expect("genetic logits from features");
    let kk = model.k();
    let scalar = model.m.len() == 1;
    let sig = model.image_weights();
    let sig_p: Vec<f64> = (0..kk).map(|j| sigmoid_prime(if scalar { model.m[0] } else { model.m[j] })).collect();
    let side = model.image_side(&out.y_img, &out.y_hat, band);

    let mut d_img = vec![0.0; kk];
    let mut d_hat = vec![0.0; kk];
    let mut d_gen = vec![0.0; kk];
    let mut d_m = vec![0.0; model.m.len()];
    let mut add_m = |j: usize, v: f64| d_m[if scalar { 0 } else { j }] += v;

    // Gated CE: image side when abstaining, true genetics otherwise.
    let other = if side.abstain { &out.y_hat } else { y_gen };
    let mixed = super::logits::mix_logits(&out.y_img, other, &model.m);
    let (ce, g) = cross_entropy(&mixed, f.label);
    let mut loss = ce;
    for j in 0..kk {
        d_img[j] += sig[j] * g[j];
        let d_other = (1.0 - sig[j]) * g[j];
        if side.abstain {
            d_hat[j] += d_other;
        } else {
            d_gen[j] += d_other;
        }
        if sig_p[j] != 0.0 {
            add_m(j, sig_p[j] * (out.y_img[j] - other[j]) * g[j]);
        }
    }

    if cfg.lambda_margin > 0.0 && kk >= 2 && side.worst.iter().all(|v| v.is_finite()) {
        let (ml, g) = margin_loss(&side.worst, side.k)?;
        loss += cfg.lambda_margin * ml;
        for j in 0..kk {
            let gj = cfg.lambda_margin * g[j];
            d_img[j] += sig[j] * gj;
            d_hat[j] += (1.0 - sig[j]) * gj;
            if sig_p[j] != 0.0 {
                let d = band.delta_for(j);
                let shifted = if j == side.k { out.y_hat[j] - d } else { out.y_hat[j] + d };
                add_m(j, sig_p[j] * (out.y_img[j] - shifted) * gj);
            }
        }
    }

    if cfg.lambda_predictor > 0.0 {
        let (pl, g) = predictor_loss(y_gen, &out.y_hat);
        loss += cfg.lambda_predictor * pl;
        for j in 0..kk {
            d_hat[j] += cfg.lambda_predictor * g[j];
            d_gen[j] -= cfg.lambda_predictor * g[j];
        }
    }

    let mut grad = CalGrad::zeros(model);
    grad.loss = loss;
    grad.d_m = d_m;
    model.image.head.accumulate_grad(&d_img, &f.s_img, &mut grad.d_image_head);
    model.predictor.accumulate_grad(&d_hat, &f.s_img, &mut grad.d_predictor);
    model.genetic.head.accumulate_grad(&d_gen, s_gen, &mut grad.d_genetic_head);
    Ok(grad)
}

/// Batch mean of the per-sample terms plus the modality term, added once.
pub fn cal_batch_loss(
    model: &CalModel,
    band: &ConformalBand,
    features: &[CalFeatures],
    batch: &[usize],
    cfg: &CalConfig,
) -> Result<CalGrad> {
    let parts: Vec<CalGrad> = batch
        .par_iter()
        .map(|&i| cal_sample_loss(model, band, &features[i], cfg))
        .collect::<Result<_>>()?;
    let mut total = CalGrad::zeros(model);
    let scale = 1.0 / batch.len().max(1) as f64;
    for p in &parts {
        total.add_scaled(p, scale);
    }
    if cfg.lambda_modality > 0.0 {
        let (l, g) = modality_loss(&model.m);
        total.loss += cfg.lambda_modality * l;
        total.d_m.iter_mut().zip(g).for_each(|(a, b)| *a += cfg.lambda_modality * b);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of training samples on the image-only branch of the gate.
    pub gated_image_fraction: f64,
    pub mean_image_weight: f64,
}

/// Trains CAL on `train`, recalibrating the gate on `calibration` at the
/// start of every epoch. The two splits must be disjoint.
pub fn train_cal(
    image: &ProtoPNet,
    genetic: &ProtoPNet,
    train: &[&Sample],
    calibration: &[&Sample],
    cfg: &CalConfig,
) -> Result<(CalModel, Vec<CalEpoch>)> {
    cfg.validate()?;
    let train_ids: std::collections::HashSet<u64> = train.iter().map(|s| s.id).collect();
    if let Some(s) = calibration.iter().find(|s| train_ids.contains(&s.id)) {
        return Err(Error::SplitOverlap(s.id));
    }
    if calibration.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset { min_per_class: 1 });
    }
    let mut model = CalModel::new(image.clone(), genetic.clone(), cfg.m_init, cfg.scalar_m, cfg.k_rule)?;
    let train_feats = model.features(train)?;
    let cal_feats = model.features(calibration)?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let opt = || Sgd::new(cfg.lr, cfg.momentum).with_decay(cfg.lr_step_size, cfg.lr_gamma);
    let (mut opt_m, mut opt_img, mut opt_gen, mut opt_pred) = (opt(), opt(), opt(), opt());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let band = model.calibrate(&cal_feats, cfg.alpha_train, cfg.band_mode, cfg.bonferroni)?;
        let order = oversample_indices(&labels, cfg.seed.wrapping_add(epoch as u64 + 1));
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let g = cal_batch_loss(&model, &band, &train_feats, batch, cfg)?;
            if !g.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "cal",
                    epoch,
                    batch: b,
                    detail: format!("loss={}", g.loss),
                });
            }
            total += g.loss * batch.len() as f64;
            let t = cfg.trainable;
            if t.modality {
                opt_m.step(&mut model.m, &g.d_m, epoch);
            }
            if t.image_head {
                opt_img.step(&mut model.image.head.weights, &g.d_image_head, epoch);
            }
            if t.genetic_head {
                opt_gen.step(&mut model.genetic.head.weights, &g.d_genetic_head, epoch);
            }
            if t.predictor {
                opt_pred.step(&mut model.predictor.weights, &g.d_predictor, epoch);
            }
        }
        let gated = train_feats
            .par_iter()
            .map(|f| {
                let o = model.outputs(f)?;
                Ok(model.image_side(&o.y_img, &o.y_hat, &band).abstain as usize)
            })
            .collect::<Result<Vec<usize>>>()?
            .into_iter()
            .sum::<usize>();
        let w = model.image_weights();
        history.push(CalEpoch {
            epoch,
            loss: total / order.len().max(1) as f64,
            gated_image_fraction: gated as f64 / train_feats.len() as f64,
            mean_image_weight: w.iter().sum::<f64>() / w.len() as f64,
        });
    }
    Ok((model, history))
}
