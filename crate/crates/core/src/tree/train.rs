//! Unimodal ProtoTree training over frozen embeddings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, Sample};
use crate::error::{Error, Result};
use crate::math::{dot, norm};
use crate::optim::Adam;
use crate::proto::projection::project_with_patches;
use crate::proto::similarity::{backprop_pooled, pooled_similarities};
use crate::proto::{Candidate, Patches, PrototypeSet};

use super::{hard_predict, leaf_update, leaf_weights, soft_cross_entropy, PathRecord, Routing, Tree};

/// Prototype initialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeInit {
    /// Top-down class partitioning of the training patches.
    Greedy,
    /// A random training patch per node.
    RandomPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeTrainConfig {
    pub depth: usize,
    pub init: TreeInit,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Pseudo-count added to every class when a leaf is updated.
    pub smoothing: f64,
    /// Leaf updates run after the final projection.
    pub refresh_iters: usize,
    /// Projecting unimodal prototypes onto single patches breaks the
    /// difference-of-means splits on frozen embeddings, so it is opt-in.
    pub project: bool,
    pub seed: u64,
}

impl Default for TreeTrainConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            init: TreeInit::Greedy,
            epochs: 5,
            batch_size: 64,
            lr: 0.001,
            smoothing: 1e-3,
            refresh_iters: 3,
            project: false,
            seed: 0,
        }
    }
}

impl TreeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config("smoothing must be finite and non-negative".into()));
        }
        if self.depth == 0 || self.depth > 12 {
            return Err(Error::Config(format!("tree depth must be in 1..=12, got {}", self.depth)));
        }
        Ok(())
    }
}

/// A unimodal tree with one prototype per internal node.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoTree {
    pub tree: Tree,
    pub protos: PrototypeSet,
    pub modality: Modality,
}

impl ProtoTree {
    pub fn similarities(&self, patches: &Patches) -> Result<Vec<f64>> {
        Ok(pooled_similarities(patches, &self.protos)?.values)
    }

    pub fn predict(&self, sample: &Sample) -> Result<(usize, PathRecord)> {
        let s = self.similarities(&sample_patches(sample, self.modality)?)?;
        hard_predict(&self.tree, &s)
    }
}

pub fn sample_patches(sample: &Sample, modality: Modality) -> Result<Patches> {
    match modality {
        Modality::Image => Ok(Patches::new(&sample.image)),
        Modality::Genetic => sample.genetic.as_ref().map(Patches::new).ok_or_else(|| {
            Error::InvalidArgument(format!("sample {} has no genetic embedding", sample.id))
        }),
    }
}

pub fn modality_patches(samples: &[&Sample], modality: Modality) -> Result<Vec<Patches>> {
    samples.par_iter().map(|s| sample_patches(s, modality)).collect()
}

/// Runs `iters` leaf updates over the full set using soft routing.
pub(crate) fn refresh_leaves(
    tree: &mut Tree,
    similarities: &[Vec<f64>],
    labels: &[usize],
    smoothing: f64,
    iters: usize,
) -> Result<()> {
    for _ in 0..iters {
        let batch: Vec<(Vec<f64>, usize)> = similarities
            .par_iter()
            .zip(labels.par_iter())
            .map(|(s, &y)| Ok((leaf_weights(tree, s)?, y)))
            .collect::<Result<_>>()?;
        leaf_update(tree, &batch, smoothing)?;
    }
    Ok(())
}

/// Trains prototypes by gradient descent on the soft-routing cross-entropy,
/// with one leaf update per epoch, then projects and refreshes the leaves.
pub fn train_prototree(samples: &[&Sample], k: usize, modality: Modality, cfg: &TreeTrainConfig) -> Result<ProtoTree> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset { min_per_class: 1 });
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label, k });
    }
    let patches = modality_patches(samples, modality)?;
    let dim = patches[0].dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tree = Tree::uniform(cfg.depth, k, Routing::Unimodal(modality))?;
    let p = tree.n_internal();

    let mut protos = match cfg.init {
        TreeInit::Greedy => greedy_prototypes(&patches, &labels, k, cfg.depth)?,
        TreeInit::RandomPatch => {
            let mut vectors = Vec::with_capacity(p * dim);
            for _ in 0..p {
                let pt = &patches[rng.random_range(0..patches.len())];
                let i = rng.random_range(0..pt.len());
                vectors.extend(pt.patch(i).iter().map(|v| v + 1e-3 * rng.random_range(-1.0..1.0)));
            }
            PrototypeSet::new(dim, vectors, None)?
        }
    };
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let sims = all_similarities(&patches, &protos)?;
        refresh_leaves(&mut tree, &sims, &labels, cfg.smoothing, 1)?;
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let pooled = pooled_similarities(&patches[i], &protos)?;
                    let (loss, ds) = soft_cross_entropy(&tree, &pooled.values, labels[i])?;
                    let mut g = vec![0.0; protos.vectors.len()];
                    backprop_pooled(&patches[i], &protos, &pooled, &ds, &mut g);
                    Ok((loss, g))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut grad = vec![0.0; protos.vectors.len()];
            for (l, g) in &parts {
                loss += l * scale;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b * scale;
                }
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    stage: "prototree",
                    epoch,
                    batch: b,
                    detail: format!("loss={loss}"),
                });
            }
            adam.step(&mut protos.vectors, &grad);
        }
    }

    if cfg.project && cfg.epochs > 0 {
        let candidates: Vec<Candidate<'_>> = samples
            .iter()
            .map(|s| {
                let embedding = match modality {
                    Modality::Image => &s.image,
                    Modality::Genetic => s.genetic.as_ref().expect("checked by modality_patches"),
                };
                Candidate {
                    sample_id: s.id,
                    label: s.label,
                    embedding,
                }
            })
            .collect();
        protos = project_with_patches(&protos, &candidates, &patches, false)?;
    }
    if cfg.epochs > 0 {
        let sims = all_similarities(&patches, &protos)?;
        refresh_leaves(&mut tree, &sims, &labels, cfg.smoothing, cfg.refresh_iters)?;
    }
    Ok(ProtoTree { tree, protos, modality })
}

pub(crate) fn all_similarities(patches: &[Patches], protos: &PrototypeSet) -> Result<Vec<Vec<f64>>> {
    patches
        .par_iter()
        .map(|pt| Ok(pooled_similarities(pt, protos)?.values))
        .collect()
}

fn mean_patch(pt: &Patches) -> Vec<f64> {
    let mut m = vec![0.0; pt.dim];
    for i in 0..pt.len() {
        for (a, b) in m.iter_mut().zip(pt.patch(i)) {
            *a += b / pt.len() as f64;
        }
    }
    m
}

/// Leading principal direction of `rows` by power iteration.
fn leading_direction(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|d| 1.0 + d as f64 * 1e-3).collect();
    for _ in 0..100 {
        let mut next = vec![0.0; dim];
        for r in rows {
            let c = dot(r, &v);
            next.iter_mut().zip(r).for_each(|(a, b)| *a += c * b);
        }
        let n = norm(&next);
        if n < 1e-12 {
            break;
        }
        v = next.into_iter().map(|x| x / n).collect();
    }
    v
}

/// Builds prototypes top-down: the classes reaching a node are split in
/// half along the leading direction of their centered mean patches, and the
/// prototype is the difference between the two halves' means.
pub fn greedy_prototypes(patches: &[Patches], labels: &[usize], k: usize, depth: usize) -> Result<PrototypeSet> {
    let dim = patches[0].dim;
    let n_internal = (1usize << depth) - 1;
    let features: Vec<Vec<f64>> = patches.iter().map(mean_patch).collect();
    let mut protos = PrototypeSet::new(dim, vec![0.0; n_internal * dim], None)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); 2 * n_internal + 1];
    members[0] = (0..patches.len()).collect();
    for n in 0..n_internal {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for &i in &members[n] {
            counts[labels[i]] += 1;
            sums[labels[i]].iter_mut().zip(&features[i]).for_each(|(a, b)| *a += b);
        }
        let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
        let means: Vec<Vec<f64>> = present
            .iter()
            .map(|&c| sums[c].iter().map(|v| v / counts[c] as f64).collect())
            .collect();
        let proto: Vec<f64> = match present.len() {
            0 => vec![1.0; dim],
            1 => means[0].clone(),
            m => {
                let centre: Vec<f64> = (0..dim).map(|d| means.iter().map(|r| r[d]).sum::<f64>() / m as f64).collect();
                let centred: Vec<Vec<f64>> = means
                    .iter()
                    .map(|r| r.iter().zip(&centre).map(|(a, b)| a - b).collect())
                    .collect();
                let v = leading_direction(&centred, dim);
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| dot(&centred[a], &v).total_cmp(&dot(&centred[b], &v)).then(a.cmp(&b)));
                let (left, right) = order.split_at(m / 2);
                let mean_of = |idx: &[usize]| -> Vec<f64> {
                    (0..dim).map(|d| idx.iter().map(|&j| means[j][d]).sum::<f64>() / idx.len() as f64).collect()
                };
                let (ml, mr) = (mean_of(left), mean_of(right));
                let start: Vec<f64> = mr.iter().zip(&ml).map(|(a, b)| a - b).collect();
                let goes_right: Vec<bool> = {
                    let mut r = vec![false; k];
                    for &j in right {
                        r[present[j]] = true;
                    }
                    r
                };
                let targets: Vec<(usize, bool)> = members[n].iter().map(|&i| (i, goes_right[labels[i]])).collect();
                fit_split(patches, &targets, start)?
            }
        };
        let proto = if norm(&proto) < 1e-12 { vec![1.0; dim] } else { proto };
        protos.vector_mut(n).copy_from_slice(&proto);
        let single = PrototypeSet::new(dim, proto, None)?;
        let routed: Vec<usize> = std::mem::take(&mut members[n]);
        for i in routed {
            let s = pooled_similarities(&patches[i], &single)?.values[0];
            members[if s > 0.5 { 2 * n + 2 } else { 2 * n + 1 }].push(i);
        }
    }
    Ok(protos)
}

/// Adjusts one prototype so that max-pooled similarity falls on the target
/// side of 0.5 (logistic surrogate with a fixed slope).
fn fit_split(patches: &[Patches], targets: &[(usize, bool)], start: Vec<f64>) -> Result<Vec<f64>> {
    const STEPS: usize = 60;
    const SLOPE: f64 = 12.0;
    let dim = start.len();
    let scale = norm(&start).max(1e-12);
    let mut proto = PrototypeSet::new(dim, start.iter().map(|v| v / scale).collect(), None)?;
    let mut opt = Adam::new(0.05);
    let weight = 1.0 / targets.len().max(1) as f64;
    for _ in 0..STEPS {
        let grad = targets
            .par_iter()
            .map(|&(i, right)| {
                let pooled = pooled_similarities(&patches[i], &proto)?;
                let z = SLOPE * (2.0 * pooled.values[0] - 1.0);
                let y = if right { 1.0 } else { 0.0 };
                let ds = weight * (crate::math::sigmoid(z) - y) * 2.0 * SLOPE;
                let mut g = vec![0.0; dim];
                backprop_pooled(&patches[i], &proto, &pooled, &[ds], &mut g);
                Ok(g)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?
            .into_iter()
            .fold(vec![0.0; dim], |mut acc, g| {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                acc
            });
        opt.step(&mut proto.vectors, &grad);
    }
    Ok(proto.vectors)
}
