//! Unimodal ProtoPNets over frozen embeddings: class-assigned prototypes,
//! a linear head, and phase-scheduled training with projection.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Checkpoint;
use crate::data::{oversample_indices, Modality, Sample};
use crate::error::{Error, Result};
use crate::math::{argmax, cross_entropy};
use crate::optim::Sgd;
use crate::proto::projection::project_with_patches;
use crate::proto::similarity::{backprop_pooled, pooled_similarities};
use crate::proto::{cluster_separation_loss, Candidate, LinearHead, Patches, PrototypeSet};
use crate::tree::train::{modality_patches, sample_patches};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    /// Prototype + head epochs before the first projection.
    pub pre_project_epochs: usize,
    /// Each phase runs joint epochs, a projection, then head-only epochs.
    pub n_post_project_phases: usize,
    pub epochs_per_phase: usize,
    pub last_layer_epochs: usize,
    /// Uniform multiplier on every epoch count.
    pub phase_multiplier: usize,
    pub proto_lr: f64,
    pub head_lr: f64,
    pub momentum: f64,
    /// Epochs between learning-rate decays (0 disables decay).
    pub lr_step_size: usize,
    pub lr_gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            pre_project_epochs: 5,
            n_post_project_phases: 1,
            epochs_per_phase: 5,
            last_layer_epochs: 5,
            phase_multiplier: 1,
            proto_lr: 0.05,
            head_lr: 0.05,
            momentum: 0.9,
            lr_step_size: 5,
            lr_gamma: 0.5,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtoPNetConfig {
    pub protos_per_class: usize,
    pub cluster_coef: f64,
    pub separation_coef: f64,
    pub l1_coef: f64,
    /// Initial weight of incorrect-class connections; defaults to −0.5 for
    /// images and 0 for genetics.
    pub incorrect_connection: Option<f64>,
    pub schedule: PhaseSchedule,
}

impl Default for ProtoPNetConfig {
    fn default() -> Self {
        Self {
            protos_per_class: 2,
            cluster_coef: 0.8,
            separation_coef: 0.08,
            l1_coef: 1e-4,
            incorrect_connection: None,
            schedule: PhaseSchedule::default(),
        }
    }
}

impl ProtoPNetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if self.protos_per_class == 0 {
            return Err(Error::Config("protos_per_class must be at least 1".into()));
        }
        if s.batch_size == 0 || s.phase_multiplier == 0 {
            return Err(Error::Config("batch_size and phase_multiplier must be positive".into()));
        }
        let finite = [
            self.cluster_coef,
            self.separation_coef,
            self.l1_coef,
            s.proto_lr,
            s.head_lr,
            s.momentum,
            s.lr_gamma,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("ProtoPNet coefficients must be finite".into()));
        }
        if s.proto_lr < 0.0 || s.head_lr < 0.0 || !(0.0..1.0).contains(&s.momentum) || s.lr_gamma <= 0.0 {
            return Err(Error::Config("invalid learning-rate settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoPNet {
    pub k: usize,
    pub modality: Modality,
    pub protos: PrototypeSet,
    pub head: LinearHead,
}

impl ProtoPNet {
    /// Max-pooled similarities for pre-extracted patches.
    pub fn similarities(&self, patches: &Patches) -> Result<Vec<f64>> {
        Ok(pooled_similarities(patches, &self.protos)?.values)
    }

    pub fn logits(&self, patches: &Patches) -> Result<Vec<f64>> {
        self.head.forward(&self.similarities(patches)?)
    }

    pub fn sample_logits(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.logits(&sample_patches(sample, self.modality)?)
    }

    pub fn predict(&self, sample: &Sample) -> Result<usize> {
        Ok(argmax(&self.sample_logits(sample)?))
    }
}

/// Gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoPNetGrad {
    pub loss: f64,
    pub d_protos: Vec<f64>,
    pub d_head: Vec<f64>,
}

fn sample_loss(model: &ProtoPNet, patches: &Patches, label: usize, cfg: &ProtoPNetConfig) -> Result<ProtoPNetGrad> {
    let pooled = pooled_similarities(patches, &model.protos)?;
    let logits = model.head.forward(&pooled.values)?;
    let (ce, d_logits) = cross_entropy(&logits, label);
    let cs = cluster_separation_loss(&pooled.values, label, &model.protos)?;
    let loss = ce + cfg.cluster_coef * cs.cluster + cfg.separation_coef * cs.separation;
    let mut d_head = vec![0.0; model.head.weights.len()];
    model.head.accumulate_grad(&d_logits, &pooled.values, &mut d_head);
    let mut d_s = model.head.backward_input(&d_logits);
    d_s[cs.cluster_proto] -= cfg.cluster_coef;
    if let Some(p) = cs.separation_proto {
        d_s[p] += cfg.separation_coef;
    }
    let mut d_protos = vec![0.0; model.protos.vectors.len()];
    backprop_pooled(patches, &model.protos, &pooled, &d_s, &mut d_protos);
    Ok(ProtoPNetGrad { loss, d_protos, d_head })
}

/// Mean of CE + cluster + separation over the batch, plus the L1 penalty on
/// incorrect-class connections.
pub fn protopnet_batch_loss(
    model: &ProtoPNet,
    patches: &[Patches],
    labels: &[usize],
    batch: &[usize],
    cfg: &ProtoPNetConfig,
) -> Result<ProtoPNetGrad> {
    let parts: Vec<ProtoPNetGrad> = batch
        .par_iter()
        .map(|&i| sample_loss(model, &patches[i], labels[i], cfg))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut total = ProtoPNetGrad {
        loss: 0.0,
        d_protos: vec![0.0; model.protos.vectors.len()],
        d_head: vec![0.0; model.head.weights.len()],
    };
    for p in &parts {
        total.loss += scale * p.loss;
        total.d_protos.iter_mut().zip(&p.d_protos).for_each(|(a, b)| *a += scale * b);
        total.d_head.iter_mut().zip(&p.d_head).for_each(|(a, b)| *a += scale * b);
    }
    if cfg.l1_coef != 0.0 {
        let assignment = model.protos.class_assignment.as_ref().expect("ProtoPNet prototypes are class-assigned");
        for c in 0..model.k {
            for (j, &owner) in assignment.iter().enumerate() {
                if owner != c {
                    let w = model.head.weights[c * model.head.p + j];
                    total.loss += cfg.l1_coef * w.abs();
                    total.d_head[c * model.head.p + j] += cfg.l1_coef * if w > 0.0 { 1.0 } else if w < 0.0 { -1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok(total)
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoPNetReport {
    pub epochs: Vec<EpochMetrics>,
    /// Fraction of training predictions changed by each projection.
    pub projection_flips: Vec<f64>,
}

pub fn metrics_csv(epochs: &[EpochMetrics]) -> String {
    let mut s = String::from("phase,epoch,loss,train_accuracy\n");
    for e in epochs {
        let _ = writeln!(s, "{},{},{},{}", e.phase, e.epoch, e.loss, e.train_accuracy);
    }
    s
}

/// Class-connected head and prototypes copied from random own-class
/// training patches.
pub fn init_protopnet(
    samples: &[&Sample],
    patches: &[Patches],
    k: usize,
    modality: Modality,
    cfg: &ProtoPNetConfig,
) -> Result<ProtoPNet> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in samples.iter().enumerate() {
        if s.label >= k {
            return Err(Error::LabelOutOfRange { label: s.label, k });
        }
        by_class[s.label].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::InvalidArgument(format!("class {c} has no training samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
    let dim = patches[0].dim;
    let mut vectors = Vec::with_capacity(k * cfg.protos_per_class * dim);
    let mut assignment = Vec::with_capacity(k * cfg.protos_per_class);
    for (c, members) in by_class.iter().enumerate() {
        for _ in 0..cfg.protos_per_class {
            let pt = &patches[members[rng.random_range(0..members.len())]];
            vectors.extend_from_slice(pt.patch(rng.random_range(0..pt.len())));
            assignment.push(c);
        }
    }
    let protos = PrototypeSet::new(dim, vectors, Some(assignment.clone()))?;
    let incorrect = cfg.incorrect_connection.unwrap_or(match modality {
        Modality::Image => -0.5,
        Modality::Genetic => 0.0,
    });
    Ok(ProtoPNet {
        k,
        modality,
        protos,
        head: LinearHead::class_connected(k, &assignment, incorrect),
    })
}

struct Trainer<'a> {
    samples: &'a [&'a Sample],
    patches: Vec<Patches>,
    labels: Vec<usize>,
    cfg: &'a ProtoPNetConfig,
    proto_opt: Sgd,
    head_opt: Sgd,
    global_epoch: usize,
    report: ProtoPNetReport,
}

impl Trainer<'_> {
    fn predictions(&self, model: &ProtoPNet) -> Result<Vec<usize>> {
        self.patches.par_iter().map(|p| Ok(argmax(&model.logits(p)?))).collect()
    }

    fn run_epochs(&mut self, model: &mut ProtoPNet, phase: &str, epochs: usize, train_protos: bool) -> Result<()> {
        let s = &self.cfg.schedule;
        for _ in 0..epochs * s.phase_multiplier {
            let epoch = self.global_epoch;
            let order = oversample_indices(&self.labels, s.seed.wrapping_add(epoch as u64 + 1));
            let mut total = 0.0;
            for (b, batch) in order.chunks(s.batch_size).enumerate() {
                let g = protopnet_batch_loss(model, &self.patches, &self.labels, batch, self.cfg)?;
                if !g.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: "protopnet",
                        epoch,
                        batch: b,
                        detail: format!("phase={phase} loss={}", g.loss),
                    });
                }
                total += g.loss * batch.len() as f64;
                if train_protos {
                    self.proto_opt.step(&mut model.protos.vectors, &g.d_protos, epoch);
                }
                self.head_opt.step(&mut model.head.weights, &g.d_head, epoch);
            }
            let preds = self.predictions(model)?;
            let correct = preds.iter().zip(&self.labels).filter(|(p, y)| p == y).count();
            self.report.epochs.push(EpochMetrics {
                phase: phase.to_string(),
                epoch,
                loss: total / order.len().max(1) as f64,
                train_accuracy: correct as f64 / self.labels.len() as f64,
            });
            self.global_epoch += 1;
        }
        Ok(())
    }

    fn project(&mut self, model: &mut ProtoPNet) -> Result<()> {
        let before = self.predictions(model)?;
        let candidates: Vec<Candidate<'_>> = self
            .samples
            .iter()
            .map(|s| Candidate {
                sample_id: s.id,
                label: s.label,
                embedding: match model.modality {
                    Modality::Image => &s.image,
                    Modality::Genetic => s.genetic.as_ref().expect("checked by modality_patches"),
                },
            })
            .collect();
        model.protos = project_with_patches(&model.protos, &candidates, &self.patches, true)?;
        let after = self.predictions(model)?;
        let flips = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        self.report.projection_flips.push(flips as f64 / before.len() as f64);
        Ok(())
    }
}

/// Trains a ProtoPNet: prototype + head epochs, projection, then for each
/// post phase joint epochs, projection and head-only epochs.
pub fn train_protopnet(
    samples: &[&Sample],
    k: usize,
    modality: Modality,
    cfg: &ProtoPNetConfig,
) -> Result<(ProtoPNet, ProtoPNetReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset { min_per_class: 1 });
    }
    let patches = modality_patches(samples, modality)?;
    let mut model = init_protopnet(samples, &patches, k, modality, cfg)?;
    let s = &cfg.schedule;
    let mut trainer = Trainer {
        samples,
        labels: samples.iter().map(|s| s.label).collect(),
        patches,
        cfg,
        proto_opt: Sgd::new(s.proto_lr, s.momentum).with_decay(s.lr_step_size, s.lr_gamma),
        head_opt: Sgd::new(s.head_lr, s.momentum).with_decay(s.lr_step_size, s.lr_gamma),
        global_epoch: 0,
        report: ProtoPNetReport {
            epochs: Vec::new(),
            projection_flips: Vec::new(),
        },
    };
    let total_epochs = s.pre_project_epochs + s.n_post_project_phases * (s.epochs_per_phase + s.last_layer_epochs);
    if total_epochs == 0 {
        return Ok((model, trainer.report));
    }
    trainer.run_epochs(&mut model, "warm", s.pre_project_epochs, true)?;
    trainer.project(&mut model)?;
    for phase in 0..s.n_post_project_phases {
        trainer.run_epochs(&mut model, &format!("joint{phase}"), s.epochs_per_phase, true)?;
        trainer.project(&mut model)?;
        trainer.run_epochs(&mut model, &format!("last{phase}"), s.last_layer_epochs, false)?;
    }
    Ok((model, trainer.report))
}

pub fn protopnet_checkpoint(model: &ProtoPNet) -> Checkpoint {
    let mut ck = Checkpoint::new();
    model.protos.write_to(&mut ck, "protos");
    ck.put_f64("head.weights", vec![model.k, model.head.p], model.head.weights.clone());
    if let Some(b) = &model.head.bias {
        ck.put_f64("head.bias", vec![model.k], b.clone());
    }
    ck.put_meta(&json!({
        "kind": "protopnet",
        "modality": model.modality.as_str(),
        "k": model.k,
        "prototypes": model.protos.len(),
        "dim": model.protos.dim,
    }));
    ck
}

pub fn protopnet_from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<ProtoPNet> {
    let name = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
    let protos = PrototypeSet::read_from(ck, &name("protos"))?;
    let shape = ck.shape(&name("head.weights"))?.to_vec();
    if shape.len() != 2 || shape[1] != protos.len() {
        return Err(Error::DimensionMismatch {
            what: "head weights".into(),
            expected: format!("[k, {}]", protos.len()),
            found: format!("{shape:?}"),
        });
    }
    let bias_name = name("head.bias");
    let head = LinearHead {
        k: shape[0],
        p: shape[1],
        weights: ck.f64(&name("head.weights"))?.to_vec(),
        bias: if ck.has(&bias_name) { Some(ck.f64(&bias_name)?.to_vec()) } else { None },
    };
    let modality_name = name("modality");
    let modality = if ck.has(&modality_name) {
        match ck.u8(&modality_name)?.first() {
            Some(1) => Modality::Genetic,
            _ => Modality::Image,
        }
    } else {
        ck.meta()?["modality"].as_str().unwrap_or_default().parse()?
    };
    Ok(ProtoPNet {
        k: head.k,
        modality,
        protos,
        head,
    })
}

pub fn save_protopnet(model: &ProtoPNet, path: &Path) -> Result<()> {
    protopnet_checkpoint(model).save(path)
}

pub fn load_protopnet(path: &Path) -> Result<ProtoPNet> {
    let ck = Checkpoint::load(path)?;
    if ck.meta()?["kind"] != "protopnet" {
        return Err(Error::InvalidArgument(format!("{} is not a ProtoPNet checkpoint", path.display())));
    }
    protopnet_from_checkpoint(&ck, "")
}

/// Writes a ProtoPNet's arrays under `prefix` into another checkpoint.
pub fn embed_protopnet(ck: &mut Checkpoint, model: &ProtoPNet, prefix: &str) {
    model.protos.write_to(ck, &format!("{prefix}.protos"));
    ck.put_f64(format!("{prefix}.head.weights"), vec![model.k, model.head.p], model.head.weights.clone());
    ck.put(
        format!("{prefix}.modality"),
        vec![1],
        crate::container::ArrayData::U8(vec![(model.modality == Modality::Genetic) as u8]),
    );
}
