//! Local (per-sample) and global (per-prototype) explanations.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingMap;
use crate::error::Result;

use super::projection::Candidate;
use super::similarity::{max_pool, similarity_map};
use super::PrototypeSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalMatch {
    pub prototype: usize,
    pub similarity: f64,
    pub position: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalMatch {
    pub sample_id: u64,
    pub similarity: f64,
    pub position: (usize, usize),
}

/// Prototypes ranked by their max-pooled similarity to `e`.
pub fn local_analysis(e: &EmbeddingMap, protos: &PrototypeSet) -> Result<Vec<LocalMatch>> {
    let s = max_pool(&similarity_map(e, protos)?);
    let mut out: Vec<LocalMatch> = (0..protos.len())
        .map(|p| LocalMatch {
            prototype: p,
            similarity: s.values[p],
            position: s.argmax[p],
        })
        .collect();
    out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.prototype.cmp(&b.prototype)));
    Ok(out)
}

/// The `top_n` candidates most similar to prototype `proto`.
pub fn global_analysis(
    proto: usize,
    protos: &PrototypeSet,
    candidates: &[Candidate<'_>],
    top_n: usize,
) -> Result<Vec<GlobalMatch>> {
    let single = PrototypeSet::new(protos.dim, protos.vector(proto).to_vec(), None)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let s = max_pool(&similarity_map(c.embedding, &single)?);
        scored.push((
            i,
            GlobalMatch {
                sample_id: c.sample_id,
                similarity: s.values[0],
                position: s.argmax[0],
            },
        ));
    }
    scored.sort_by(|a, b| b.1.similarity.total_cmp(&a.1.similarity).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(top_n).map(|(_, m)| m).collect())
}
