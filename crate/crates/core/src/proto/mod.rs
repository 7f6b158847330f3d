//! The prototype layer shared by ProtoPNet and ProtoTree: cosine similarity
//! maps, spatial max-pooling, the linear head, projection onto training
//! patches, and the similarity-level regularizers.

pub mod analysis;
pub mod losses;
pub mod projection;
pub mod similarity;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Checkpoint};
use crate::error::{Error, Result};
use crate::math::matvec;

pub use analysis::{global_analysis, local_analysis, GlobalMatch, LocalMatch};
pub use losses::{cluster_separation_loss, orthogonality_loss, variability_loss, ClusterSeparation};
pub use projection::{project_prototypes, Candidate};
pub use similarity::{max_pool, similarity_map, Patches, SimilarityMap, SimilarityVector};

/// Where a projected prototype came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_id: u64,
    pub h: usize,
    pub w: usize,
}

/// `count × dim` prototype vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub class_assignment: Option<Vec<usize>>,
    pub provenance: Vec<Option<Provenance>>,
}

impl PrototypeSet {
    pub fn new(dim: usize, vectors: Vec<f64>, class_assignment: Option<Vec<usize>>) -> Result<Self> {
        if dim == 0 || vectors.is_empty() || !vectors.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                what: "prototype matrix".into(),
                expected: format!("a positive multiple of {dim}"),
                found: vectors.len().to_string(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite prototype entry".into()));
        }
        let count = vectors.len() / dim;
        if let Some(a) = &class_assignment {
            if a.len() != count {
                return Err(Error::DimensionMismatch {
                    what: "prototype class assignment".into(),
                    expected: count.to_string(),
                    found: a.len().to_string(),
                });
            }
        }
        Ok(Self {
            dim,
            vectors,
            class_assignment,
            provenance: vec![None; count],
        })
    }

    /// Gaussian initialization.
    pub fn random(count: usize, dim: usize, class_assignment: Option<Vec<usize>>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = (0..count * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::new(dim, vectors, class_assignment)
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, p: usize) -> &[f64] {
        &self.vectors[p * self.dim..(p + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.vectors[p * self.dim..(p + 1) * self.dim]
    }

    pub fn class_of(&self, p: usize) -> Option<usize> {
        self.class_assignment.as_ref().map(|a| a[p])
    }

    /// Stores vectors, class assignment and provenance under `prefix`.
    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_f64(format!("{prefix}.vectors"), vec![self.len(), self.dim], self.vectors.clone());
        if let Some(a) = &self.class_assignment {
            ck.put_u32(format!("{prefix}.class"), a.iter().map(|&c| c as u32).collect());
        }
        let flags: Vec<u8> = self.provenance.iter().map(|p| p.is_some() as u8).collect();
        let mut flat = Vec::with_capacity(3 * self.len());
        for p in &self.provenance {
            let p = p.unwrap_or(Provenance { sample_id: 0, h: 0, w: 0 });
            flat.extend([p.sample_id, p.h as u64, p.w as u64]);
        }
        ck.put(format!("{prefix}.provenance_set"), vec![flags.len()], ArrayData::U8(flags));
        ck.put(format!("{prefix}.provenance"), vec![self.len(), 3], ArrayData::U64(flat));
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let shape = ck.shape(&format!("{prefix}.vectors"))?.to_vec();
        if shape.len() != 2 {
            return Err(Error::DimensionMismatch {
                what: format!("{prefix}.vectors rank"),
                expected: "2".into(),
                found: shape.len().to_string(),
            });
        }
        let vectors = ck.f64(&format!("{prefix}.vectors"))?.to_vec();
        let class_name = format!("{prefix}.class");
        let class_assignment = if ck.has(&class_name) {
            Some(ck.u32(&class_name)?.iter().map(|&c| c as usize).collect())
        } else {
            None
        };
        let mut set = Self::new(shape[1], vectors, class_assignment)?;
        let flags = ck.u8(&format!("{prefix}.provenance_set"))?;
        let flat = ck.u64(&format!("{prefix}.provenance"))?;
        if flags.len() != set.len() || flat.len() != 3 * set.len() {
            return Err(Error::DimensionMismatch {
                what: format!("{prefix} provenance"),
                expected: set.len().to_string(),
                found: flags.len().to_string(),
            });
        }
        for (p, slot) in set.provenance.iter_mut().enumerate() {
            if flags[p] != 0 {
                *slot = Some(Provenance {
                    sample_id: flat[3 * p],
                    h: flat[3 * p + 1] as usize,
                    w: flat[3 * p + 2] as usize,
                });
            }
        }
        Ok(set)
    }
}

/// `h: R^P -> R^K`, row-major `K × P` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub k: usize,
    pub p: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl LinearHead {
    pub fn zeros(k: usize, p: usize) -> Self {
        Self {
            k,
            p,
            weights: vec![0.0; k * p],
            bias: None,
        }
    }

    /// 1 on own-class connections and `incorrect` elsewhere.
    pub fn class_connected(k: usize, class_assignment: &[usize], incorrect: f64) -> Self {
        let p = class_assignment.len();
        let mut head = Self::zeros(k, p);
        for c in 0..k {
            for (j, &owner) in class_assignment.iter().enumerate() {
                head.weights[c * p + j] = if owner == c { 1.0 } else { incorrect };
            }
        }
        head
    }

    pub fn weight(&self, class: usize, proto: usize) -> f64 {
        self.weights[class * self.p + proto]
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.p {
            return Err(Error::DimensionMismatch {
                what: "similarity vector for linear head".into(),
                expected: self.p.to_string(),
                found: s.len().to_string(),
            });
        }
        let mut y = matvec(&self.weights, self.k, self.p, s);
        if let Some(b) = &self.bias {
            for (a, b) in y.iter_mut().zip(b) {
                *a += b;
            }
        }
        Ok(y)
    }

    /// Adds `dy ⊗ s` into a weight gradient buffer.
    pub fn accumulate_grad(&self, dy: &[f64], s: &[f64], grad: &mut [f64]) {
        for (c, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[c * self.p..(c + 1) * self.p];
            for (r, &x) in row.iter_mut().zip(s) {
                *r += g * x;
            }
        }
    }

    /// `Wᵀ dy`.
    pub fn backward_input(&self, dy: &[f64]) -> Vec<f64> {
        let mut ds = vec![0.0; self.p];
        for (c, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, &w) in ds.iter_mut().zip(&self.weights[c * self.p..(c + 1) * self.p]) {
                *d += g * w;
            }
        }
        ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_head_passes_basis_vectors() {
        let mut h = LinearHead::zeros(3, 3);
        for i in 0..3 {
            h.weights[i * 3 + i] = 1.0;
        }
        assert_eq!(h.forward(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_input_without_bias_gives_zero() {
        let h = LinearHead::class_connected(2, &[0, 0, 1], -0.5);
        assert_eq!(h.forward(&[0.0; 3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn head_matches_naive_matvec() {
        let w: Vec<f64> = (0..15).map(|i| (i as f64 * 0.7).cos()).collect();
        let s = [0.1, 0.9, 0.4, 0.3, 0.75];
        let h = LinearHead {
            k: 3,
            p: 5,
            weights: w.clone(),
            bias: None,
        };
        let y = h.forward(&s).unwrap();
        for c in 0..3 {
            let mut acc = 0.0;
            for j in 0..5 {
                acc += w[c * 5 + j] * s[j];
            }
            assert!((y[c] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_is_added_when_configured() {
        let mut h = LinearHead::zeros(2, 1);
        h.bias = Some(vec![0.5, -1.0]);
        assert_eq!(h.forward(&[3.0]).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn class_connected_init() {
        let h = LinearHead::class_connected(2, &[0, 1, 1], -0.5);
        assert_eq!(h.weights, vec![1.0, -0.5, -0.5, -0.5, 1.0, 1.0]);
    }

    #[test]
    fn head_rejects_wrong_width() {
        let h = LinearHead::zeros(2, 3);
        assert!(h.forward(&[1.0]).is_err());
    }
}
