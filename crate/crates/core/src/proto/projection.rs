//! Replacing each prototype with its most similar training patch.

use rayon::prelude::*;

use crate::data::EmbeddingMap;
use crate::error::{Error, Result};
use crate::math::norm;

use super::similarity::{cosine01, Patches};
use super::{PrototypeSet, Provenance};

/// A training embedding eligible for projection.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub sample_id: u64,
    pub label: usize,
    pub embedding: &'a EmbeddingMap,
}

/// Projects every prototype onto the closest allowed training patch.
///
/// With `restrict_to_class`, prototypes carrying a class assignment only
/// consider samples of that class. Ties keep the earliest candidate and the
/// first position in row-major order.
pub fn project_prototypes(
    protos: &PrototypeSet,
    candidates: &[Candidate<'_>],
    restrict_to_class: bool,
) -> Result<PrototypeSet> {
    let patches: Vec<Patches> = candidates.iter().map(|c| Patches::new(c.embedding)).collect();
    project_with_patches(protos, candidates, &patches, restrict_to_class)
}

/// Same as [`project_prototypes`] with patches already extracted.
pub fn project_with_patches(
    protos: &PrototypeSet,
    candidates: &[Candidate<'_>],
    patches: &[Patches],
    restrict_to_class: bool,
) -> Result<PrototypeSet> {
    if let Some(p) = patches.iter().find(|p| p.dim != protos.dim) {
        return Err(Error::DimensionMismatch {
            what: "projection candidate depth".into(),
            expected: protos.dim.to_string(),
            found: p.dim.to_string(),
        });
    }
    let picks: Vec<Result<(Vec<f64>, Provenance)>> = (0..protos.len())
        .into_par_iter()
        .map(|p| {
            let v = protos.vector(p);
            let vn = norm(v);
            let class = if restrict_to_class { protos.class_of(p) } else { None };
            let mut best: Option<(f64, usize, usize)> = None;
            for (ci, (c, pt)) in candidates.iter().zip(patches).enumerate() {
                if class.is_some_and(|k| k != c.label) {
                    continue;
                }
                for i in 0..pt.len() {
                    let s = cosine01(v, vn, pt.patch(i), pt.norms[i]);
                    if best.is_none_or(|(b, _, _)| s > b) {
                        best = Some((s, ci, i));
                    }
                }
            }
            let (_, ci, i) = best.ok_or(Error::NoCandidatePatches)?;
            let pt = &patches[ci];
            Ok((
                pt.patch(i).to_vec(),
                Provenance {
                    sample_id: candidates[ci].sample_id,
                    h: i / pt.width,
                    w: i % pt.width,
                },
            ))
        })
        .collect();
    let mut out = protos.clone();
    for (p, pick) in picks.into_iter().enumerate() {
        let (v, prov) = pick?;
        out.vector_mut(p).copy_from_slice(&v);
        out.provenance[p] = Some(prov);
    }
    Ok(out)
}
