//! Desk-scale synthetic stand-in for paired image/genetic embeddings.
//!
//! Each class owns a random unit direction per modality. Every patch of a
//! sample is that direction scaled by a random strength plus isotropic noise,
//! so cosine similarity to a class direction carries the label. Image
//! strength is further scaled by a per-sample quality factor, which spreads
//! image margins out. Confusable pairs share one image direction but keep
//! distinct genetic directions: images cannot tell them apart, genetics can.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, EmbeddingMap, Modality, Sample, SplitTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub k: usize,
    pub n_per_class: usize,
    pub image_dims: [usize; 3],
    pub genetic_dims: [usize; 3],
    pub image_separability: f64,
    pub genetic_separability: f64,
    pub confusable_pairs: Vec<(usize, usize)>,
    /// Standard deviation of the per-patch noise norm.
    pub noise: f64,
    /// Lower bound of the per-sample image quality factor (upper bound 1).
    pub min_quality: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k: 16,
            n_per_class: 150,
            image_dims: [32, 2, 2],
            genetic_dims: [16, 1, 4],
            image_separability: 3.0,
            genetic_separability: 3.0,
            confusable_pairs: vec![(0, 1), (2, 3), (4, 5)],
            noise: 1.0,
            min_quality: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k == 0 || self.n_per_class == 0 {
            return bad("synthetic k and n_per_class must be positive".into());
        }
        if self.image_dims.contains(&0) || self.genetic_dims.contains(&0) {
            return bad("synthetic embedding dims must be positive".into());
        }
        if !(self.image_separability >= 0.0 && self.genetic_separability >= 0.0) {
            return bad("separability must be non-negative".into());
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.min_quality) {
            return bad("noise must be >= 0 and min_quality in [0, 1]".into());
        }
        for &(a, b) in &self.confusable_pairs {
            if a >= self.k || b >= self.k || a == b {
                return bad(format!("confusable pair ({a}, {b}) invalid for k={}", self.k));
            }
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::math::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit directions, orthonormalized when `dim >= k`.
fn class_directions(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v = unit_vector(rng, dim);
        if k <= dim {
            loop {
                for d in &dirs {
                    let c = crate::math::dot(&v, d);
                    v.iter_mut().zip(d).for_each(|(a, b)| *a -= c * b);
                }
                let n = crate::math::norm(&v);
                if n > 1e-6 {
                    v.iter_mut().for_each(|a| *a /= n);
                    break;
                }
                v = unit_vector(rng, dim);
            }
        }
        dirs.push(v);
    }
    dirs
}

fn class_map(
    rng: &mut ChaCha8Rng,
    modality: Modality,
    dims: [usize; 3],
    direction: &[f64],
    strength: f64,
    noise: f64,
) -> EmbeddingMap {
    let [depth, height, width] = dims;
    let mut e = EmbeddingMap::zeros(modality, depth, height, width);
    let noise_sd = noise / (depth as f64).sqrt();
    for h in 0..height {
        for w in 0..width {
            let s = strength * rng.random_range(0.5..=1.0);
            for (d, dir) in direction.iter().enumerate().take(depth) {
                let z: f64 = StandardNormal.sample(rng);
                e.set(d, h, w, (s * dir + noise_sd * z) as f32);
            }
        }
    }
    e
}

/// Generates `k * n_per_class` samples, ordered by class. Identical
/// `(cfg, seed)` give identical datasets.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image_dirs = class_directions(&mut rng, cfg.k, cfg.image_dims[0]);
    let genetic_dirs = class_directions(&mut rng, cfg.k, cfg.genetic_dims[0]);
    for &(a, b) in &cfg.confusable_pairs {
        image_dirs[b] = image_dirs[a].clone();
    }

    let mut samples = Vec::with_capacity(cfg.k * cfg.n_per_class);
    for c in 0..cfg.k {
        for _ in 0..cfg.n_per_class {
            let quality = rng.random_range(cfg.min_quality..=1.0);
            let image = class_map(
                &mut rng,
                Modality::Image,
                cfg.image_dims,
                &image_dirs[c],
                cfg.image_separability * quality,
                cfg.noise,
            );
            let genetic = class_map(
                &mut rng,
                Modality::Genetic,
                cfg.genetic_dims,
                &genetic_dirs[c],
                cfg.genetic_separability,
                cfg.noise,
            );
            samples.push(Sample {
                id: samples.len() as u64,
                label: c,
                split: SplitTag::Unassigned,
                image,
                genetic: Some(genetic),
            });
        }
    }
    let names = (0..cfg.k).map(|c| format!("class_{c:03}")).collect();
    Dataset::from_samples(names, samples, 1)
}

/// Gaussian jitter in embedding space, a stand-in for input-level
/// augmentation when no backbone is available.
pub fn jitter(e: &EmbeddingMap, sigma: f64, seed: u64) -> EmbeddingMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = e.clone();
    for v in out.data.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (*v as f64 + sigma * z) as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{argmax, dot, norm};

    fn mean_patch(e: &EmbeddingMap) -> Vec<f64> {
        let mut m = vec![0.0; e.depth];
        for p in e.patches() {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        m
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    /// Nearest class-mean classifier: predictions for every sample.
    fn nearest_mean(ds: &Dataset, genetic: bool) -> Vec<usize> {
        let pick = |s: &Sample| {
            if genetic {
                mean_patch(s.genetic.as_ref().unwrap())
            } else {
                mean_patch(&s.image)
            }
        };
        let dim = pick(&ds.samples[0]).len();
        let mut means = vec![vec![0.0; dim]; ds.k()];
        for s in &ds.samples {
            for (a, b) in means[s.label].iter_mut().zip(pick(s)) {
                *a += b;
            }
        }
        ds.samples
            .iter()
            .map(|s| {
                let v = pick(s);
                let scores: Vec<f64> = means.iter().map(|m| cosine(m, &v)).collect();
                argmax(&scores)
            })
            .collect()
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SynthConfig {
            n_per_class: 5,
            ..SynthConfig::default()
        };
        assert_eq!(synth_generate(&cfg, 9).unwrap(), synth_generate(&cfg, 9).unwrap());
        assert_ne!(synth_generate(&cfg, 9).unwrap(), synth_generate(&cfg, 10).unwrap());
    }

    #[test]
    fn confusable_pairs_are_the_only_image_confusions() {
        let cfg = SynthConfig {
            k: 6,
            n_per_class: 40,
            image_separability: 6.0,
            min_quality: 1.0,
            confusable_pairs: vec![(0, 1)],
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg, 1).unwrap();
        let preds = nearest_mean(&ds, false);
        let mut pair_confusions = 0;
        for (s, &p) in ds.samples.iter().zip(&preds) {
            if p != s.label {
                assert!(s.label <= 1 && p <= 1, "class {} predicted as {p}", s.label);
                pair_confusions += 1;
            }
        }
        assert!(pair_confusions > 0);
        // genetics separates everything, including the pair
        let gen = nearest_mean(&ds, true);
        assert!(ds.samples.iter().zip(&gen).all(|(s, &p)| s.label == p));
    }

    #[test]
    fn zero_genetic_separability_is_chance_level() {
        let cfg = SynthConfig {
            k: 8,
            n_per_class: 200,
            genetic_separability: 0.0,
            confusable_pairs: vec![],
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg, 2).unwrap();
        // class means are fit on half the data and scored on the other half
        let (fit, score): (Vec<_>, Vec<_>) = ds.samples.iter().partition(|s| s.id % 2 == 0);
        let dim = cfg.genetic_dims[0];
        let mut means = vec![vec![0.0; dim]; cfg.k];
        for s in &fit {
            for (a, b) in means[s.label].iter_mut().zip(mean_patch(s.genetic.as_ref().unwrap())) {
                *a += b;
            }
        }
        let correct = score
            .iter()
            .filter(|s| {
                let v = mean_patch(s.genetic.as_ref().unwrap());
                let scores: Vec<f64> = means.iter().map(|m| cosine(m, &v)).collect();
                argmax(&scores) == s.label
            })
            .count();
        let acc = correct as f64 / score.len() as f64;
        assert!((acc - 1.0 / 8.0).abs() < 0.06, "accuracy {acc}");
    }

    #[test]
    fn jitter_is_seeded() {
        let e = EmbeddingMap::zeros(Modality::Image, 3, 2, 2);
        assert_eq!(jitter(&e, 0.1, 5), jitter(&e, 0.1, 5));
        assert_eq!(jitter(&e, 0.0, 5), e);
    }
}
