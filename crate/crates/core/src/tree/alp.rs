//! ALP: a multimodal ProtoTree whose nodes are steered toward the image
//! modality wherever the image tree was already accurate.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GeneticAccess, Modality, Sample};
use crate::error::{Error, Result};
use crate::math::{binary_entropy, sigmoid, sigmoid_prime};
use crate::optim::{Adam, Sgd};
use crate::proto::projection::project_with_patches;
use crate::proto::similarity::{backprop_map, backprop_pooled, max_pool, pooled_similarities, similarity_map_patches};
use crate::proto::{orthogonality_loss, variability_loss, Candidate, Patches, PrototypeSet};

use super::leaves::{leaf_accuracy, LeafStats};
use super::train::{modality_patches, refresh_leaves, ProtoTree};
use super::{hard_traverse_with, leaf_weights, mix_similarity, soft_cross_entropy, PathRecord, Routing, Tree};

/// `m_n = −τ` on ancestors of leaves with `acc_l > t`, `+τ` elsewhere.
pub fn threshold_assignment(tree: &Tree, stats: &LeafStats, t: f64, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if stats.accuracy.len() != tree.n_leaves() {
        return Err(Error::TopologyMismatch(format!(
            "leaf statistics cover {} leaves, tree has {}",
            stats.accuracy.len(),
            tree.n_leaves()
        )));
    }
    let mut image = vec![false; tree.n_internal()];
    for (l, &acc) in stats.accuracy.iter().enumerate() {
        if acc > t {
            for (n, _) in tree.path_to_leaf(l) {
                image[n] = true;
            }
        }
    }
    Ok(image.into_iter().map(|i| if i { -tau } else { tau }).collect())
}

/// Mean binary entropy of `σ(m_n)` and its gradient.
///
/// With `printed_sign` both are negated.
pub fn routing_loss(m: &[f64], printed_sign: bool) -> (f64, Vec<f64>) {
    if m.is_empty() {
        return (0.0, Vec::new());
    }
    let scale = if printed_sign { -1.0 } else { 1.0 } / m.len() as f64;
    let loss = m.iter().map(|&v| binary_entropy(sigmoid(v))).sum::<f64>() * scale;
    let grad = m
        .iter()
        .map(|&v| if v.is_finite() { -v * sigmoid_prime(v) * scale } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Sends every modality weight to `±∞`; `m = 0` goes to the image side.
pub fn clip_modalities(tree: &mut Tree) {
    if let Routing::Multimodal(m) = &mut tree.routing {
        for v in m.iter_mut() {
            *v = if *v > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        }
    }
}

/// Copies image-tree leaves under all-image paths and genetic-tree leaves
/// elsewhere.
pub fn init_multimodal_leaves(multi: &Tree, img: &Tree, gen: &Tree) -> Result<Tree> {
    for (name, t) in [("image", img), ("genetic", gen)] {
        if t.depth != multi.depth || t.k != multi.k {
            return Err(Error::TopologyMismatch(format!(
                "{name} tree has depth {} and {} classes, multimodal tree has depth {} and {}",
                t.depth, t.k, multi.depth, multi.k
            )));
        }
    }
    let mut out = multi.clone();
    for l in 0..multi.n_leaves() {
        let image_path = multi
            .path_to_leaf(l)
            .iter()
            .all(|&(n, _)| multi.node_modality(n) == Modality::Image);
        let src = if image_path { img } else { gen };
        out.leaf_mut(l).copy_from_slice(src.leaf(l));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlpConfig {
    pub t: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub proto_lr: f64,
    pub m_lr: f64,
    pub lambda_cluster: f64,
    pub lambda_ortho: f64,
    pub lambda_var: f64,
    pub lambda_wd: f64,
    pub lambda_routing: f64,
    /// Use the negative-entropy routing term instead of entropy.
    pub printed_routing_sign: bool,
    pub smoothing: f64,
    pub refresh_iters: usize,
    pub project: bool,
    pub seed: u64,
}

impl Default for AlpConfig {
    fn default() -> Self {
        Self {
            t: 0.8,
            tau: 5.0,
            epochs: 15,
            batch_size: 64,
            proto_lr: 0.01,
            m_lr: 0.05,
            lambda_cluster: 0.05,
            lambda_ortho: 0.01,
            lambda_var: 0.1,
            lambda_wd: 1e-4,
            lambda_routing: 0.01,
            printed_routing_sign: false,
            smoothing: 1e-3,
            refresh_iters: 3,
            project: true,
            seed: 0,
        }
    }
}

impl AlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.t.is_nan() || !(self.tau > 0.0) {
            return Err(Error::Config(format!("invalid threshold t={} / tau={}", self.t, self.tau)));
        }
        let lambdas = [
            self.lambda_cluster,
            self.lambda_ortho,
            self.lambda_var,
            self.lambda_wd,
            self.lambda_routing,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("ALP loss coefficients must be finite and non-negative".into()));
        }
        if !(self.proto_lr >= 0.0 && self.m_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlpModel {
    pub tree: Tree,
    pub image_protos: PrototypeSet,
    pub genetic_protos: PrototypeSet,
}

impl AlpModel {
    pub fn modality_weights(&self) -> &[f64] {
        self.tree.modality_weights().expect("ALP trees are multimodal")
    }
}

/// Loss pieces for one sample with gradients for the trainable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AlpGrad {
    pub loss: f64,
    pub d_protos: Vec<f64>,
    pub d_m: Vec<f64>,
}

/// CE∘soft traversal plus the per-sample cluster and variability terms.
pub fn alp_sample_loss(
    tree: &Tree,
    genetic_protos: &PrototypeSet,
    s_img: &[f64],
    gen_patches: &Patches,
    label: usize,
    cfg: &AlpConfig,
) -> Result<AlpGrad> {
    let m = tree
        .modality_weights()
        .ok_or_else(|| Error::InvalidArgument("ALP loss needs a multimodal tree".into()))?;
    let map = similarity_map_patches(gen_patches, genetic_protos)?;
    let pooled = max_pool(&map);
    let s_gen = &pooled.values;
    let s = mix_similarity(s_img, s_gen, m)?;
    let (ce, ds) = soft_cross_entropy(tree, &s, label)?;
    let mut loss = ce;
    let mut d_sgen = vec![0.0; s_gen.len()];
    let mut d_m = vec![0.0; m.len()];
    for n in 0..m.len() {
        d_sgen[n] = ds[n] * sigmoid(m[n]);
        if m[n].is_finite() {
            d_m[n] = ds[n] * sigmoid_prime(m[n]) * (s_gen[n] - s_img[n]);
        }
    }
    if cfg.lambda_cluster > 0.0 {
        let best = crate::math::argmax(s_gen);
        loss -= cfg.lambda_cluster * s_gen[best];
        d_sgen[best] -= cfg.lambda_cluster;
    }
    let mut d_protos = vec![0.0; genetic_protos.vectors.len()];
    backprop_pooled(gen_patches, genetic_protos, &pooled, &d_sgen, &mut d_protos);
    if cfg.lambda_var > 0.0 && genetic_protos.len() >= 2 {
        let (var, mut d_map) = variability_loss(&map)?;
        loss += cfg.lambda_var * var;
        d_map.iter_mut().for_each(|g| *g *= cfg.lambda_var);
        backprop_map(gen_patches, genetic_protos, &d_map, &mut d_protos);
    }
    Ok(AlpGrad { loss, d_protos, d_m })
}

/// Orthogonality, weight decay and routing terms, applied once per batch.
pub fn alp_batch_terms(genetic_protos: &PrototypeSet, m: &[f64], cfg: &AlpConfig) -> Result<AlpGrad> {
    let mut loss = 0.0;
    let mut d_protos = vec![0.0; genetic_protos.vectors.len()];
    if cfg.lambda_ortho > 0.0 {
        let (o, g) = orthogonality_loss(genetic_protos)?;
        loss += cfg.lambda_ortho * o;
        for (a, b) in d_protos.iter_mut().zip(g) {
            *a += cfg.lambda_ortho * b;
        }
    }
    if cfg.lambda_wd > 0.0 {
        for (a, &p) in d_protos.iter_mut().zip(&genetic_protos.vectors) {
            loss += 0.5 * cfg.lambda_wd * p * p;
            *a += cfg.lambda_wd * p;
        }
    }
    let (r, gr) = routing_loss(m, cfg.printed_routing_sign);
    let d_m = gr.into_iter().map(|g| cfg.lambda_routing * g).collect();
    loss += cfg.lambda_routing * r;
    Ok(AlpGrad { loss, d_protos, d_m })
}

/// Mean per-sample loss plus batch terms.
pub fn alp_objective(
    tree: &Tree,
    genetic_protos: &PrototypeSet,
    s_img: &[Vec<f64>],
    gen_patches: &[Patches],
    labels: &[usize],
    batch: &[usize],
    cfg: &AlpConfig,
) -> Result<AlpGrad> {
    let parts: Vec<AlpGrad> = batch
        .par_iter()
        .map(|&i| alp_sample_loss(tree, genetic_protos, &s_img[i], &gen_patches[i], labels[i], cfg))
        .collect::<Result<_>>()?;
    let m = tree.modality_weights().unwrap_or(&[]);
    let mut total = alp_batch_terms(genetic_protos, m, cfg)?;
    let scale = 1.0 / batch.len().max(1) as f64;
    for p in &parts {
        total.loss += scale * p.loss;
        for (a, b) in total.d_protos.iter_mut().zip(&p.d_protos) {
            *a += scale * b;
        }
        for (a, b) in total.d_m.iter_mut().zip(&p.d_m) {
            *a += scale * b;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlpReport {
    pub image_leaf_stats: LeafStats,
    pub initial_census: (usize, usize),
    pub final_census: (usize, usize),
    pub epoch_losses: Vec<f64>,
}

fn check_pair(img: &ProtoTree, gen: &ProtoTree) -> Result<()> {
    if img.modality != Modality::Image || gen.modality != Modality::Genetic {
        return Err(Error::TopologyMismatch(format!(
            "expected an image and a genetic tree, got {} and {}",
            img.modality.as_str(),
            gen.modality.as_str()
        )));
    }
    if img.tree.depth != gen.tree.depth || img.tree.k != gen.tree.k {
        return Err(Error::TopologyMismatch(format!(
            "image tree (depth {}, k {}) and genetic tree (depth {}, k {}) differ",
            img.tree.depth, img.tree.k, gen.tree.depth, gen.tree.k
        )));
    }
    Ok(())
}

/// Builds the multimodal tree from two unimodal trees and trains its
/// genetic side.
///
/// With zero epochs the initialized tree is returned as is; otherwise
/// training ends with clipping, projection of the genetic prototypes and a
/// final leaf refresh. Image prototypes are never modified.
pub fn train_alp(img: &ProtoTree, gen: &ProtoTree, samples: &[&Sample], cfg: &AlpConfig) -> Result<(AlpModel, AlpReport)> {
    cfg.validate()?;
    check_pair(img, gen)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset { min_per_class: 1 });
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let img_patches = modality_patches(samples, Modality::Image)?;
    let gen_patches = modality_patches(samples, Modality::Genetic)?;
    let s_img = super::train::all_similarities(&img_patches, &img.protos)?;

    let stats = leaf_accuracy(&img.tree, &s_img, &labels)?;
    let m = threshold_assignment(&img.tree, &stats, cfg.t, cfg.tau)?;
    let blank = Tree::uniform(img.tree.depth, img.tree.k, Routing::Multimodal(m))?;
    let mut tree = init_multimodal_leaves(&blank, &img.tree, &gen.tree)?;
    let initial_census = tree.modality_census();
    let mut genetic_protos = gen.protos.clone();
    genetic_protos.provenance = vec![None; genetic_protos.len()];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut proto_opt = Adam::new(cfg.proto_lr);
    let mut m_opt = Sgd::new(cfg.m_lr, 0.0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mixed = mixed_similarities(&tree, &genetic_protos, &s_img, &gen_patches)?;
        refresh_leaves(&mut tree, &mixed, &labels, cfg.smoothing, 1)?;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let g = alp_objective(&tree, &genetic_protos, &s_img, &gen_patches, &labels, batch, cfg)?;
            if !g.loss.is_finite() || g.d_protos.iter().chain(&g.d_m).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    stage: "alp",
                    epoch,
                    batch: b,
                    detail: format!("loss={}", g.loss),
                });
            }
            epoch_loss += g.loss * batch.len() as f64;
            proto_opt.step(&mut genetic_protos.vectors, &g.d_protos);
            if let Routing::Multimodal(m) = &mut tree.routing {
                m_opt.step(m, &g.d_m, epoch);
            }
        }
        epoch_losses.push(epoch_loss / samples.len() as f64);
    }

    if cfg.epochs > 0 {
        clip_modalities(&mut tree);
        if cfg.project {
            let candidates: Vec<Candidate<'_>> = samples
                .iter()
                .map(|s| Candidate {
                    sample_id: s.id,
                    label: s.label,
                    embedding: s.genetic.as_ref().expect("checked by modality_patches"),
                })
                .collect();
            genetic_protos = project_with_patches(&genetic_protos, &candidates, &gen_patches, false)?;
        }
        let mixed = mixed_similarities(&tree, &genetic_protos, &s_img, &gen_patches)?;
        refresh_leaves(&mut tree, &mixed, &labels, cfg.smoothing, cfg.refresh_iters)?;
    }
    let report = AlpReport {
        image_leaf_stats: stats,
        initial_census,
        final_census: tree.modality_census(),
        epoch_losses,
    };
    Ok((
        AlpModel {
            tree,
            image_protos: img.protos.clone(),
            genetic_protos,
        },
        report,
    ))
}

fn mixed_similarities(
    tree: &Tree,
    genetic_protos: &PrototypeSet,
    s_img: &[Vec<f64>],
    gen_patches: &[Patches],
) -> Result<Vec<Vec<f64>>> {
    let m = tree.modality_weights().expect("multimodal tree");
    s_img
        .par_iter()
        .zip(gen_patches.par_iter())
        .map(|(si, gp)| mix_similarity(si, &pooled_similarities(gp, genetic_protos)?.values, m))
        .collect()
}

/// Soft-routing leaf weights for a batch, used by the leaf statistics tests.
pub fn alp_leaf_weights(model: &AlpModel, sample: &Sample) -> Result<Vec<f64>> {
    let si = pooled_similarities(&Patches::new(&sample.image), &model.image_protos)?.values;
    let g = sample
        .genetic
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("sample {} has no genetic embedding", sample.id)))?;
    let sg = pooled_similarities(&Patches::new(g), &model.genetic_protos)?.values;
    leaf_weights(&model.tree, &mix_similarity(&si, &sg, model.modality_weights())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlpPrediction {
    pub sample_id: u64,
    pub true_class: usize,
    pub predicted: usize,
    pub path: PathRecord,
}

/// Hard inference that measures the genetic embedding at most once, and
/// only when the path reaches a node that reads it.
pub fn infer_alp(model: &AlpModel, sample: &Sample, access: &GeneticAccess) -> Result<AlpPrediction> {
    let s_img = pooled_similarities(&Patches::new(&sample.image), &model.image_protos)?.values;
    let m = model.modality_weights();
    let mut s_gen: Option<Vec<f64>> = None;
    let path = hard_traverse_with(&model.tree, |n| {
        let a = sigmoid(m[n]);
        if a == 0.0 {
            return Ok(s_img[n]);
        }
        if s_gen.is_none() {
            let g = access.measure(sample).ok_or(Error::GeneticRequired {
                sample_id: sample.id,
                node: n,
            })?;
            s_gen = Some(pooled_similarities(&Patches::new(g), &model.genetic_protos)?.values);
        }
        let g = s_gen.as_ref().expect("set above")[n];
        Ok(if a == 1.0 { g } else { (a * g + (1.0 - a) * s_img[n]).clamp(0.0, 1.0) })
    })?;
    Ok(AlpPrediction {
        sample_id: sample.id,
        true_class: sample.label,
        predicted: crate::math::argmax(model.tree.leaf(path.leaf)),
        path,
    })
}

pub const PATHS_CSV_HEADER: &str = "sample_id,leaf,predicted,true_class,genetic_used,path";

pub fn paths_to_csv(preds: &[AlpPrediction]) -> String {
    let mut s = String::from(PATHS_CSV_HEADER);
    s.push('\n');
    for p in preds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            p.sample_id,
            p.path.leaf,
            p.predicted,
            p.true_class,
            p.path.genetic_used,
            p.path.describe()
        );
    }
    s
}
