//! Tree checkpoints.

use std::path::Path;

use serde_json::json;

use crate::container::Checkpoint;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::proto::PrototypeSet;

use super::alp::AlpModel;
use super::train::ProtoTree;
use super::{Routing, Tree};

fn put_leaves(ck: &mut Checkpoint, tree: &Tree) {
    ck.put_f64("tree.leaves", vec![tree.n_leaves(), tree.k], tree.leaves.clone());
}

fn read_leaves(ck: &Checkpoint, routing: Routing) -> Result<Tree> {
    let shape = ck.shape("tree.leaves")?.to_vec();
    let (n_leaves, k) = match shape[..] {
        [l, k] if l.is_power_of_two() && k > 0 => (l, k),
        _ => return Err(Error::TopologyMismatch(format!("bad leaf table shape {shape:?}"))),
    };
    let mut tree = Tree::uniform(n_leaves.trailing_zeros() as usize, k, routing)?;
    tree.leaves = ck.f64("tree.leaves")?.to_vec();
    Ok(tree)
}

fn check_kind(ck: &Checkpoint, kind: &str) -> Result<serde_json::Value> {
    let meta = ck.meta()?;
    if meta["kind"] != kind {
        return Err(Error::InvalidArgument(format!(
            "checkpoint holds a {} model, expected {kind}",
            meta["kind"]
        )));
    }
    Ok(meta)
}

pub fn prototree_checkpoint(model: &ProtoTree) -> Checkpoint {
    let mut ck = Checkpoint::new();
    put_leaves(&mut ck, &model.tree);
    model.protos.write_to(&mut ck, "protos");
    ck.put_meta(&json!({
        "kind": "prototree",
        "modality": model.modality.as_str(),
        "depth": model.tree.depth,
        "k": model.tree.k,
        "prototypes": model.protos.len(),
        "dim": model.protos.dim,
    }));
    ck
}

pub fn prototree_from_checkpoint(ck: &Checkpoint) -> Result<ProtoTree> {
    let meta = check_kind(ck, "prototree")?;
    let modality: Modality = meta["modality"].as_str().unwrap_or_default().parse()?;
    let tree = read_leaves(ck, Routing::Unimodal(modality))?;
    let protos = PrototypeSet::read_from(ck, "protos")?;
    if protos.len() != tree.n_internal() {
        return Err(Error::TopologyMismatch(format!(
            "{} prototypes for {} internal nodes",
            protos.len(),
            tree.n_internal()
        )));
    }
    Ok(ProtoTree { tree, protos, modality })
}

pub fn save_prototree(model: &ProtoTree, path: &Path) -> Result<()> {
    prototree_checkpoint(model).save(path)
}

pub fn load_prototree(path: &Path) -> Result<ProtoTree> {
    prototree_from_checkpoint(&Checkpoint::load(path)?)
}

fn select_rows(set: &PrototypeSet, rows: &[usize]) -> Option<PrototypeSet> {
    if rows.is_empty() {
        return None;
    }
    let mut vectors = Vec::with_capacity(rows.len() * set.dim);
    for &r in rows {
        vectors.extend_from_slice(set.vector(r));
    }
    let mut out = PrototypeSet::new(set.dim, vectors, None).ok()?;
    out.provenance = rows.iter().map(|&r| set.provenance[r]).collect();
    Some(out)
}

fn write_side(ck: &mut Checkpoint, prefix: &str, set: &PrototypeSet, rows: Vec<usize>) {
    ck.put_u32(format!("{prefix}.nodes"), rows.iter().map(|&r| r as u32).collect());
    ck.put_u64(format!("{prefix}.dim"), vec![set.dim as u64]);
    if let Some(sub) = select_rows(set, &rows) {
        sub.write_to(ck, prefix);
    }
}

fn read_side(ck: &Checkpoint, prefix: &str, n_nodes: usize) -> Result<PrototypeSet> {
    let nodes = ck.u32(&format!("{prefix}.nodes"))?;
    let dim = ck.u64(&format!("{prefix}.dim"))?.first().copied().unwrap_or(0) as usize;
    let mut full = PrototypeSet::new(dim, vec![0.0; n_nodes.max(1) * dim], None)?;
    if nodes.is_empty() {
        return Ok(full);
    }
    let sub = PrototypeSet::read_from(ck, prefix)?;
    if sub.len() != nodes.len() || sub.dim != dim {
        return Err(Error::TopologyMismatch(format!("{prefix} rows do not match node list")));
    }
    for (i, &n) in nodes.iter().enumerate() {
        let n = n as usize;
        if n >= n_nodes {
            return Err(Error::TopologyMismatch(format!("{prefix} node {n} out of range")));
        }
        full.vector_mut(n).copy_from_slice(sub.vector(i));
        full.provenance[n] = sub.provenance[i];
    }
    Ok(full)
}

/// Only prototypes that can influence routing are stored: image rows where
/// `σ(m_n) < 1` and genetic rows where `σ(m_n) > 0`.
pub fn alp_checkpoint(model: &AlpModel, leaf_accuracy: Option<&[f64]>) -> Checkpoint {
    let mut ck = Checkpoint::new();
    let m = model.modality_weights();
    put_leaves(&mut ck, &model.tree);
    ck.put_f64("tree.m", vec![m.len()], m.to_vec());
    let image_rows = (0..m.len()).filter(|&n| sigmoid(m[n]) < 1.0).collect();
    let genetic_rows = (0..m.len()).filter(|&n| sigmoid(m[n]) > 0.0).collect();
    write_side(&mut ck, "image", &model.image_protos, image_rows);
    write_side(&mut ck, "genetic", &model.genetic_protos, genetic_rows);
    let (image, genetic) = model.tree.modality_census();
    ck.put_meta(&json!({
        "kind": "alp",
        "depth": model.tree.depth,
        "k": model.tree.k,
        "clipped": m.iter().all(|v| v.is_infinite()),
        "census": {"image": image, "genetic": genetic},
        "leaf_accuracy": leaf_accuracy,
    }));
    ck
}

pub fn alp_from_checkpoint(ck: &Checkpoint) -> Result<AlpModel> {
    check_kind(ck, "alp")?;
    let m = ck.f64("tree.m")?.to_vec();
    let n = m.len();
    let tree = read_leaves(ck, Routing::Multimodal(m))?;
    Ok(AlpModel {
        tree,
        image_protos: read_side(ck, "image", n)?,
        genetic_protos: read_side(ck, "genetic", n)?,
    })
}

pub fn save_alp(model: &AlpModel, leaf_accuracy: Option<&[f64]>, path: &Path) -> Result<()> {
    alp_checkpoint(model, leaf_accuracy).save(path)
}

pub fn load_alp(path: &Path) -> Result<AlpModel> {
    alp_from_checkpoint(&Checkpoint::load(path)?)
}
