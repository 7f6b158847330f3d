//! Full binary ProtoTrees: soft and hard traversal, multimodal node mixing,
//! gradient-free leaf updates, unimodal training and ALP.
//!
//! Nodes are heap-ordered: the root is 0 and node `n` has children `2n+1`
//! and `2n+2`. A tree of depth `d` has `2^d − 1` internal nodes followed by
//! `2^d` leaves; internal node `n` compares against prototype `n`.

pub mod alp;
pub mod checkpoint;
pub mod leaves;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::math::sigmoid;

pub use alp::{
    clip_modalities, infer_alp, init_multimodal_leaves, routing_loss, threshold_assignment, train_alp, AlpConfig,
    AlpModel, AlpPrediction,
};
pub use leaves::{leaf_accuracy, leaf_update, LeafStats};
pub use train::{train_prototree, ProtoTree, TreeInit, TreeTrainConfig};

/// How internal nodes pick their similarity.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    Unimodal(Modality),
    /// Per-node modality weights `m_n`; `σ(m_n)` weights the genetic side.
    Multimodal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub depth: usize,
    pub k: usize,
    /// `2^depth × k` class distributions, row-major.
    pub leaves: Vec<f64>,
    pub routing: Routing,
}

impl Tree {
    /// A tree with uniform leaf distributions.
    pub fn uniform(depth: usize, k: usize, routing: Routing) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("a tree needs at least one class".into()));
        }
        if depth > 24 {
            return Err(Error::InvalidArgument(format!("tree depth {depth} is too large")));
        }
        let n_leaves = 1usize << depth;
        if let Routing::Multimodal(m) = &routing {
            if m.len() != n_leaves - 1 {
                return Err(Error::DimensionMismatch {
                    what: "modality weights".into(),
                    expected: (n_leaves - 1).to_string(),
                    found: m.len().to_string(),
                });
            }
        }
        Ok(Self {
            depth,
            k,
            leaves: vec![1.0 / k as f64; n_leaves * k],
            routing,
        })
    }

    pub fn n_internal(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn n_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn leaf(&self, l: usize) -> &[f64] {
        &self.leaves[l * self.k..(l + 1) * self.k]
    }

    pub fn leaf_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.leaves[l * self.k..(l + 1) * self.k]
    }

    /// `ln` of the leaf distribution.
    pub fn leaf_logits(&self, l: usize) -> Vec<f64> {
        self.leaf(l).iter().map(|p| p.ln()).collect()
    }

    /// Stores `softmax(logits)` as the leaf distribution.
    pub fn set_leaf_logits(&mut self, l: usize, logits: &[f64]) {
        let d = crate::math::softmax(logits);
        self.leaf_mut(l).copy_from_slice(&d);
    }

    pub fn modality_weights(&self) -> Option<&[f64]> {
        match &self.routing {
            Routing::Multimodal(m) => Some(m),
            Routing::Unimodal(_) => None,
        }
    }

    /// The dominant modality of node `n` (`σ(m_n) > 0.5` means genetic).
    pub fn node_modality(&self, n: usize) -> Modality {
        match &self.routing {
            Routing::Unimodal(m) => *m,
            Routing::Multimodal(m) if m[n] > 0.0 => Modality::Genetic,
            Routing::Multimodal(_) => Modality::Image,
        }
    }

    /// Whether node `n` reads the genetic similarity at all.
    pub fn node_reads_genetic(&self, n: usize) -> bool {
        match &self.routing {
            Routing::Unimodal(m) => *m == Modality::Genetic,
            Routing::Multimodal(m) => sigmoid(m[n]) > 0.0,
        }
    }

    /// Internal nodes from the root to leaf `l`, with the branch taken.
    pub fn path_to_leaf(&self, l: usize) -> Vec<(usize, bool)> {
        let mut node = l + self.n_internal();
        let mut path = Vec::with_capacity(self.depth);
        while node > 0 {
            let parent = (node - 1) / 2;
            path.push((parent, node == 2 * parent + 2));
            node = parent;
        }
        path.reverse();
        path
    }

    /// Number of internal nodes per dominant modality: `(image, genetic)`.
    pub fn modality_census(&self) -> (usize, usize) {
        let genetic = (0..self.n_internal())
            .filter(|&n| self.node_modality(n) == Modality::Genetic)
            .count();
        (self.n_internal() - genetic, genetic)
    }
}

fn check_similarities(tree: &Tree, s: &[f64]) -> Result<()> {
    if s.len() != tree.n_internal() {
        return Err(Error::DimensionMismatch {
            what: "similarity vector for tree".into(),
            expected: tree.n_internal().to_string(),
            found: s.len().to_string(),
        });
    }
    if let Some((index, &value)) = s.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::SimilarityOutOfRange { index, value });
    }
    Ok(())
}

/// Probability of reaching each leaf under soft routing.
pub fn leaf_weights(tree: &Tree, s: &[f64]) -> Result<Vec<f64>> {
    check_similarities(tree, s)?;
    let p = tree.n_internal();
    let mut w = vec![0.0; 2 * p + 1];
    w[0] = 1.0;
    for n in 0..p {
        w[2 * n + 1] = w[n] * (1.0 - s[n]);
        w[2 * n + 2] = w[n] * s[n];
    }
    Ok(w.split_off(p))
}

/// `r(n_root, s)` over leaf logits.
pub fn soft_traverse(tree: &Tree, s: &[f64]) -> Result<Vec<f64>> {
    let w = leaf_weights(tree, s)?;
    let mut y = vec![0.0; tree.k];
    for (l, &wl) in w.iter().enumerate() {
        if wl == 0.0 {
            continue;
        }
        for (a, b) in y.iter_mut().zip(tree.leaf_logits(l)) {
            *a += wl * b;
        }
    }
    Ok(y)
}

/// The routing-weighted mixture of leaf distributions.
pub fn soft_distribution(tree: &Tree, s: &[f64]) -> Result<Vec<f64>> {
    let w = leaf_weights(tree, s)?;
    let mut y = vec![0.0; tree.k];
    for (l, &wl) in w.iter().enumerate() {
        if wl == 0.0 {
            continue;
        }
        for (a, b) in y.iter_mut().zip(tree.leaf(l)) {
            *a += wl * b;
        }
    }
    Ok(y)
}

/// `−ln Σ_l w_l d_l[y]` and its gradient with respect to `s`.
pub fn soft_cross_entropy(tree: &Tree, s: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_similarities(tree, s)?;
    if label >= tree.k {
        return Err(Error::LabelOutOfRange { label, k: tree.k });
    }
    let p = tree.n_internal();
    let total = 2 * p + 1;
    let mut r = vec![0.0; total];
    for l in 0..tree.n_leaves() {
        r[p + l] = tree.leaf(l)[label];
    }
    for n in (0..p).rev() {
        r[n] = (1.0 - s[n]) * r[2 * n + 1] + s[n] * r[2 * n + 2];
    }
    let mut prefix = vec![0.0; p];
    if p > 0 {
        prefix[0] = 1.0;
    }
    for n in 0..p {
        for (child, w) in [(2 * n + 1, 1.0 - s[n]), (2 * n + 2, s[n])] {
            if child < p {
                prefix[child] = prefix[n] * w;
            }
        }
    }
    let prob = r[0];
    let loss = -prob.ln();
    let grad = (0..p).map(|n| -prefix[n] * (r[2 * n + 2] - r[2 * n + 1]) / prob).collect();
    Ok((loss, grad))
}

/// One step of a hard path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub node: usize,
    pub modality: Modality,
    pub similarity: f64,
    pub right: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub steps: Vec<PathStep>,
    pub leaf: usize,
    pub genetic_used: bool,
}

impl PathRecord {
    /// `node:modality:L|R` steps joined by `;`.
    pub fn describe(&self) -> String {
        self.steps
            .iter()
            .map(|st| format!("{}:{}:{}", st.node, st.modality.as_str(), if st.right { 'R' } else { 'L' }))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Greedy routing where `similarity_at(n)` is evaluated only for visited
/// nodes.
pub fn hard_traverse_with<F>(tree: &Tree, mut similarity_at: F) -> Result<PathRecord>
where
    F: FnMut(usize) -> Result<f64>,
{
    let p = tree.n_internal();
    let mut node = 0;
    let mut steps = Vec::with_capacity(tree.depth);
    let mut genetic_used = false;
    while node < p {
        let s = similarity_at(node)?;
        let right = s > 0.5;
        genetic_used |= tree.node_reads_genetic(node);
        steps.push(PathStep {
            node,
            modality: tree.node_modality(node),
            similarity: s,
            right,
        });
        node = if right { 2 * node + 2 } else { 2 * node + 1 };
    }
    Ok(PathRecord {
        steps,
        leaf: node - p,
        genetic_used,
    })
}

/// Goes right at node `n` iff `s_n > 0.5`.
pub fn hard_traverse(tree: &Tree, s: &[f64]) -> Result<PathRecord> {
    check_similarities(tree, s)?;
    hard_traverse_with(tree, |n| Ok(s[n]))
}

/// Hard-routed class prediction.
pub fn hard_predict(tree: &Tree, s: &[f64]) -> Result<(usize, PathRecord)> {
    let path = hard_traverse(tree, s)?;
    Ok((crate::math::argmax(tree.leaf(path.leaf)), path))
}

/// `σ(m_n) s_gen + (1 − σ(m_n)) s_img`, elementwise.
pub fn mix_similarity(s_img: &[f64], s_gen: &[f64], m: &[f64]) -> Result<Vec<f64>> {
    if s_img.len() != s_gen.len() || s_img.len() != m.len() {
        return Err(Error::DimensionMismatch {
            what: "mixed similarity inputs".into(),
            expected: s_img.len().to_string(),
            found: format!("{} genetic, {} weights", s_gen.len(), m.len()),
        });
    }
    Ok(s_img
        .iter()
        .zip(s_gen)
        .zip(m)
        .map(|((&i, &g), &w)| {
            let a = sigmoid(w);
            if a == 1.0 {
                g
            } else if a == 0.0 {
                i
            } else {
                (a * g + (1.0 - a) * i).clamp(0.0, 1.0)
            }
        })
        .collect())
}
