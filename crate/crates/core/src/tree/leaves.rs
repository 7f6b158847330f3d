//! Leaf statistics and the derivative-free leaf update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::argmax;

use super::{hard_traverse, Tree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafStats {
    pub routed: Vec<usize>,
    pub correct: Vec<usize>,
    /// `correct / routed`, or 0 for unreached leaves.
    pub accuracy: Vec<f64>,
}

/// Hard-routes every sample and tallies per-leaf accuracy.
pub fn leaf_accuracy(tree: &Tree, similarities: &[Vec<f64>], labels: &[usize]) -> Result<LeafStats> {
    if similarities.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels for leaf statistics".into(),
            expected: similarities.len().to_string(),
            found: labels.len().to_string(),
        });
    }
    let n = tree.n_leaves();
    let mut routed = vec![0; n];
    let mut correct = vec![0; n];
    for (s, &y) in similarities.iter().zip(labels) {
        let l = hard_traverse(tree, s)?.leaf;
        routed[l] += 1;
        if argmax(tree.leaf(l)) == y {
            correct[l] += 1;
        }
    }
    let accuracy = routed
        .iter()
        .zip(&correct)
        .map(|(&r, &c)| if r == 0 { 0.0 } else { c as f64 / r as f64 })
        .collect();
    Ok(LeafStats {
        routed,
        correct,
        accuracy,
    })
}

/// One multiplicative update from a batch of `(leaf weights, label)`.
///
/// Each leaf accumulates `π_l d_l[y] / p(y|x)` on the true class; leaves
/// that accumulate nothing are left untouched, the rest become
/// `normalize(u + smoothing)`.
pub fn leaf_update(tree: &mut Tree, batch: &[(Vec<f64>, usize)], smoothing: f64) -> Result<()> {
    let n = tree.n_leaves();
    let k = tree.k;
    let mut u = vec![0.0; n * k];
    for (w, y) in batch {
        let y = *y;
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, k });
        }
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                what: "leaf weights".into(),
                expected: n.to_string(),
                found: w.len().to_string(),
            });
        }
        let p: f64 = w.iter().enumerate().map(|(l, &wl)| wl * tree.leaf(l)[y]).sum();
        if p <= 0.0 {
            continue;
        }
        for (l, &wl) in w.iter().enumerate() {
            u[l * k + y] += wl * tree.leaf(l)[y] / p;
        }
    }
    for l in 0..n {
        let row = &u[l * k..(l + 1) * k];
        let mass: f64 = row.iter().sum();
        if mass <= 0.0 {
            continue;
        }
        let z = mass + smoothing * k as f64;
        let leaf = tree.leaf_mut(l);
        for (d, &v) in leaf.iter_mut().zip(row) {
            *d = (v + smoothing) / z;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use crate::tree::Routing;

    #[test]
    fn single_leaf_converges_to_observed_class() {
        let mut t = Tree::uniform(0, 3, Routing::Unimodal(Modality::Image)).unwrap();
        let batch = vec![(vec![1.0], 0); 5];
        leaf_update(&mut t, &batch, 0.0).unwrap();
        assert_eq!(t.leaf(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn unreached_leaf_is_unchanged() {
        let mut t = Tree::uniform(1, 2, Routing::Unimodal(Modality::Image)).unwrap();
        t.leaves = vec![0.3, 0.7, 0.6, 0.4];
        leaf_update(&mut t, &[(vec![1.0, 0.0], 1)], 0.1).unwrap();
        assert_eq!(t.leaf(1), &[0.6, 0.4]);
        assert!((t.leaf(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_leaf_closed_form() {
        let mut t = Tree::uniform(1, 2, Routing::Unimodal(Modality::Image)).unwrap();
        t.leaves = vec![0.5, 0.5, 0.2, 0.8];
        // Sample A: weights (0.75, 0.25), label 0. p = 0.375 + 0.05 = 0.425.
        // Sample B: weights (0.5, 0.5), label 1. p = 0.25 + 0.4 = 0.65.
        let batch = vec![(vec![0.75, 0.25], 0), (vec![0.5, 0.5], 1)];
        leaf_update(&mut t, &batch, 0.0).unwrap();
        let u00 = 0.75 * 0.5 / 0.425;
        let u01 = 0.5 * 0.5 / 0.65;
        let u10 = 0.25 * 0.2 / 0.425;
        let u11 = 0.5 * 0.8 / 0.65;
        let expect = [u00 / (u00 + u01), u01 / (u00 + u01), u10 / (u10 + u11), u11 / (u10 + u11)];
        for (a, b) in t.leaves.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn leaf_accuracy_counts_and_unreached_zero() {
        let mut t = Tree::uniform(1, 2, Routing::Unimodal(Modality::Image)).unwrap();
        t.leaves = vec![0.9, 0.1, 0.5, 0.5];
        let sims = vec![vec![0.1], vec![0.2], vec![0.3], vec![0.4]];
        let stats = leaf_accuracy(&t, &sims, &[0, 0, 0, 1]).unwrap();
        assert_eq!(stats.routed, vec![4, 0]);
        assert_eq!(stats.accuracy, vec![0.75, 0.0]);
    }
}
