//! Similarity-level regularizers and their gradients.

use crate::error::{Error, Result};
use crate::math::{dot, norm};

use super::{PrototypeSet, SimilarityMap};

/// Cluster and separation terms plus the prototypes that attained them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSeparation {
    pub cluster: f64,
    pub separation: f64,
    pub cluster_proto: usize,
    pub separation_proto: Option<usize>,
}

/// `ℓ_clst = −max own-class s_p`, `ℓ_sep = max other-class s_p`.
///
/// Without a class assignment every prototype counts as own-class and the
/// separation term is zero.
pub fn cluster_separation_loss(s: &[f64], label: usize, protos: &PrototypeSet) -> Result<ClusterSeparation> {
    if s.len() != protos.len() {
        return Err(Error::DimensionMismatch {
            what: "similarity vector".into(),
            expected: protos.len().to_string(),
            found: s.len().to_string(),
        });
    }
    let mut own: Option<usize> = None;
    let mut other: Option<usize> = None;
    for (p, &v) in s.iter().enumerate() {
        let is_own = protos.class_of(p).is_none_or(|c| c == label);
        let slot = if is_own { &mut own } else { &mut other };
        if slot.is_none_or(|b| v > s[b]) {
            *slot = Some(p);
        }
    }
    let own = own.ok_or(Error::NoOwnClassPrototype(label))?;
    Ok(ClusterSeparation {
        cluster: -s[own],
        separation: other.map_or(0.0, |o| s[o]),
        cluster_proto: own,
        separation_proto: other,
    })
}

/// `‖P̂P̂ᵀ − I‖²_F` and its gradient with respect to the raw prototypes.
pub fn orthogonality_loss(protos: &PrototypeSet) -> Result<(f64, Vec<f64>)> {
    let n = protos.len();
    let d = protos.dim;
    let mut unit = Vec::with_capacity(n * d);
    let mut norms = Vec::with_capacity(n);
    for p in 0..n {
        let v = protos.vector(p);
        let l = norm(v);
        if l == 0.0 {
            return Err(Error::ZeroNormPrototype(p));
        }
        norms.push(l);
        unit.extend(v.iter().map(|x| x / l));
    }
    let row = |i: usize| &unit[i * d..(i + 1) * d];
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let mut g_hat = vec![0.0; d];
        for j in 0..n {
            let g = dot(row(i), row(j)) - if i == j { 1.0 } else { 0.0 };
            loss += g * g;
            for (o, &u) in g_hat.iter_mut().zip(row(j)) {
                *o += 4.0 * g * u;
            }
        }
        let proj = dot(&g_hat, row(i));
        for (k, o) in grad[i * d..(i + 1) * d].iter_mut().enumerate() {
            *o = (g_hat[k] - proj * row(i)[k]) / norms[i];
        }
    }
    Ok((loss, grad))
}

/// `−(1/HW) Σ_hw Var_p(m[:,h,w])` with the `1/(P−1)` estimator, and its
/// gradient with respect to the map entries.
pub fn variability_loss(m: &SimilarityMap) -> Result<(f64, Vec<f64>)> {
    let p = m.prototypes;
    if p < 2 {
        return Err(Error::InvalidArgument(format!(
            "variability loss needs at least 2 prototypes, got {p}"
        )));
    }
    let n = m.height * m.width;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p * n];
    let scale = 1.0 / n as f64;
    let denom = (p - 1) as f64;
    for i in 0..n {
        // Shifted by the first entry so constant columns give exactly zero.
        let first = m.data[i];
        let mean = first + (0..p).map(|q| m.data[q * n + i] - first).sum::<f64>() / p as f64;
        let var = (0..p).map(|q| (m.data[q * n + i] - mean).powi(2)).sum::<f64>() / denom;
        loss -= scale * var;
        for q in 0..p {
            grad[q * n + i] = -scale * 2.0 * (m.data[q * n + i] - mean) / denom;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(p: usize, h: usize, w: usize, data: Vec<f64>) -> SimilarityMap {
        SimilarityMap {
            prototypes: p,
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn cluster_minimum_when_own_prototype_matches() {
        let protos = PrototypeSet::new(1, vec![1.0, 1.0, 1.0], Some(vec![0, 1, 1])).unwrap();
        let l = cluster_separation_loss(&[1.0, 0.3, 0.6], 0, &protos).unwrap();
        assert_eq!(l.cluster, -1.0);
        assert_eq!(l.separation, 0.6);
        assert_eq!(l.separation_proto, Some(2));
    }

    #[test]
    fn agnostic_similarities() {
        let protos = PrototypeSet::new(1, vec![1.0; 4], Some(vec![0, 0, 1, 1])).unwrap();
        let l = cluster_separation_loss(&[0.5; 4], 1, &protos).unwrap();
        assert_eq!((l.cluster, l.separation), (-0.5, 0.5));
        assert_eq!(l.cluster_proto, 2);
    }

    #[test]
    fn missing_own_class_is_an_error() {
        let protos = PrototypeSet::new(1, vec![1.0; 2], Some(vec![0, 0])).unwrap();
        assert!(matches!(
            cluster_separation_loss(&[0.5, 0.5], 1, &protos),
            Err(Error::NoOwnClassPrototype(1))
        ));
    }

    #[test]
    fn unassigned_prototypes_are_all_own_class() {
        let protos = PrototypeSet::new(1, vec![1.0; 3], None).unwrap();
        let l = cluster_separation_loss(&[0.2, 0.9, 0.4], 5, &protos).unwrap();
        assert_eq!((l.cluster, l.separation, l.separation_proto), (-0.9, 0.0, None));
    }

    #[test]
    fn orthonormal_rows_have_zero_loss() {
        let protos = PrototypeSet::new(3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0], None).unwrap();
        assert!(orthogonality_loss(&protos).unwrap().0.abs() < 1e-15);
    }

    #[test]
    fn identical_prototypes_give_two() {
        let protos = PrototypeSet::new(2, vec![0.6, 0.8, 0.6, 0.8], None).unwrap();
        assert!((orthogonality_loss(&protos).unwrap().0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_prototype_is_rejected() {
        let protos = PrototypeSet::new(2, vec![0.0, 0.0, 1.0, 0.0], None).unwrap();
        assert!(matches!(orthogonality_loss(&protos), Err(Error::ZeroNormPrototype(0))));
    }

    #[test]
    fn constant_columns_have_zero_variability() {
        assert!(variability_loss(&map(3, 1, 2, vec![0.4; 6])).unwrap().0.abs() < 1e-15);
    }

    #[test]
    fn binary_column_variance() {
        let (l, _) = variability_loss(&map(2, 1, 1, vec![0.0, 1.0])).unwrap();
        assert!((l + 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_prototype_is_rejected() {
        assert!(variability_loss(&map(1, 1, 1, vec![0.3])).is_err());
    }
}
