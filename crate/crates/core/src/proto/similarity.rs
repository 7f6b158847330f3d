//! `g₁` (cosine similarity maps) and `g₂` (spatial max-pooling).

use crate::data::EmbeddingMap;
use crate::error::{Error, Result};
use crate::math::dot;

use super::PrototypeSet;

/// Cosine similarity rescaled to `[0, 1]`; a zero vector on either side
/// gives 0.5.
#[inline]
pub fn cosine01(a: &[f64], a_norm: f64, b: &[f64], b_norm: f64) -> f64 {
    if a_norm == 0.0 || b_norm == 0.0 {
        return 0.5;
    }
    let cos = (dot(a, b) / (a_norm * b_norm)).clamp(-1.0, 1.0);
    0.5 * (1.0 + cos)
}

/// Adds `scale · ∂cosine01(p, z)/∂p` into `out`.
#[inline]
pub fn accumulate_cosine01_grad(p: &[f64], p_norm: f64, z: &[f64], z_norm: f64, scale: f64, out: &mut [f64]) {
    if p_norm == 0.0 || z_norm == 0.0 || scale == 0.0 {
        return;
    }
    let cos = dot(p, z) / (p_norm * z_norm);
    let a = 0.5 * scale / (p_norm * z_norm);
    let b = 0.5 * scale * cos / (p_norm * p_norm);
    for ((o, &pi), &zi) in out.iter_mut().zip(p).zip(z) {
        *o += a * zi - b * pi;
    }
}

/// The latent patches of an embedding map, flattened with their norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub norms: Vec<f64>,
}

impl Patches {
    pub fn new(e: &EmbeddingMap) -> Self {
        let mut data = Vec::with_capacity(e.data.len());
        for p in e.patches() {
            data.extend(p);
        }
        let norms = data.chunks_exact(e.depth).map(crate::math::norm).collect();
        Self {
            dim: e.depth,
            height: e.height,
            width: e.width,
            data,
            norms,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// `P × H × W` similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub prototypes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SimilarityMap {
    pub fn get(&self, p: usize, h: usize, w: usize) -> f64 {
        self.data[(p * self.height + h) * self.width + w]
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[p * n..(p + 1) * n]
    }
}

/// Max-pooled similarities with the position that attained each maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub values: Vec<f64>,
    pub argmax: Vec<(usize, usize)>,
}

fn check_dim(protos: &PrototypeSet, depth: usize) -> Result<()> {
    if protos.dim != depth {
        return Err(Error::DimensionMismatch {
            what: "prototype dimension vs embedding depth".into(),
            expected: depth.to_string(),
            found: protos.dim.to_string(),
        });
    }
    Ok(())
}

pub fn prototype_norms(protos: &PrototypeSet) -> Vec<f64> {
    protos.vectors.chunks_exact(protos.dim).map(crate::math::norm).collect()
}

pub fn similarity_map_patches(patches: &Patches, protos: &PrototypeSet) -> Result<SimilarityMap> {
    check_dim(protos, patches.dim)?;
    let norms = prototype_norms(protos);
    let mut data = Vec::with_capacity(protos.len() * patches.len());
    for p in 0..protos.len() {
        let v = protos.vector(p);
        for i in 0..patches.len() {
            data.push(cosine01(v, norms[p], patches.patch(i), patches.norms[i]));
        }
    }
    Ok(SimilarityMap {
        prototypes: protos.len(),
        height: patches.height,
        width: patches.width,
        data,
    })
}

pub fn similarity_map(e: &EmbeddingMap, protos: &PrototypeSet) -> Result<SimilarityMap> {
    similarity_map_patches(&Patches::new(e), protos)
}

/// Row-wise maximum; ties go to the first position in row-major order.
pub fn max_pool(m: &SimilarityMap) -> SimilarityVector {
    let mut values = Vec::with_capacity(m.prototypes);
    let mut argmax = Vec::with_capacity(m.prototypes);
    for p in 0..m.prototypes {
        let row = m.row(p);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        values.push(row[best]);
        argmax.push((best / m.width, best % m.width));
    }
    SimilarityVector { values, argmax }
}

/// Max-pooled similarities straight from patches.
pub fn pooled_similarities(patches: &Patches, protos: &PrototypeSet) -> Result<SimilarityVector> {
    Ok(max_pool(&similarity_map_patches(patches, protos)?))
}

/// Chains `∂loss/∂s` through max-pooling into prototype gradients
/// (`P × D`, accumulated into `grad`).
pub fn backprop_pooled(
    patches: &Patches,
    protos: &PrototypeSet,
    pooled: &SimilarityVector,
    d_s: &[f64],
    grad: &mut [f64],
) {
    let norms = prototype_norms(protos);
    for (p, &g) in d_s.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let (h, w) = pooled.argmax[p];
        let i = h * patches.width + w;
        accumulate_cosine01_grad(
            protos.vector(p),
            norms[p],
            patches.patch(i),
            patches.norms[i],
            g,
            &mut grad[p * protos.dim..(p + 1) * protos.dim],
        );
    }
}

/// Chains `∂loss/∂map` (same layout as [`SimilarityMap::data`]) into
/// prototype gradients.
pub fn backprop_map(patches: &Patches, protos: &PrototypeSet, d_map: &[f64], grad: &mut [f64]) {
    let norms = prototype_norms(protos);
    let n = patches.len();
    for p in 0..protos.len() {
        for i in 0..n {
            accumulate_cosine01_grad(
                protos.vector(p),
                norms[p],
                patches.patch(i),
                patches.norms[i],
                d_map[p * n + i],
                &mut grad[p * protos.dim..(p + 1) * protos.dim],
            );
        }
    }
}
