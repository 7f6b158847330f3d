//! Stratified train/validation/test splits and class-balancing oversampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Guards floor/round against products like 10 * 0.6 landing a hair below 6.
const RATIO_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub spec: SplitSpec,
    /// Original class id of each new (dense) class id.
    pub retained_classes: Vec<usize>,
    /// New class id for each original class id, `None` when dropped.
    pub new_label: Vec<Option<usize>>,
    pub min_per_class: usize,
}

/// Per-class split sizes, each within one sample of its exact share, whose
/// split totals also match the global largest-remainder totals.
///
/// Floors are taken first; the leftover units (at most two per class) are
/// routed to splits by a unit-capacity max-flow between classes and splits,
/// which always admits a complete assignment because the fractional parts
/// themselves are a feasible fractional flow.
fn allocate(counts: &[usize], ratios: [f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = counts.iter().sum();
    let mut sizes: Vec<[usize; 3]> = Vec::with_capacity(counts.len());
    let mut fracs: Vec<[f64; 3]> = Vec::with_capacity(counts.len());
    let mut leftover = Vec::with_capacity(counts.len());
    for &n in counts {
        let exact = ratios.map(|r| n as f64 * r);
        let floor = exact.map(|x| (x + RATIO_EPS).floor() as usize);
        let used: usize = floor.iter().sum();
        leftover.push(n.saturating_sub(used));
        fracs.push(std::array::from_fn(|s| (exact[s] - floor[s] as f64).max(0.0)));
        sizes.push(floor);
    }

    // global demand per split: largest remainder over column fraction sums
    let units: usize = leftover.iter().sum();
    let col: [f64; 3] = std::array::from_fn(|s| fracs.iter().map(|f| f[s]).sum());
    let mut demand: [usize; 3] = col.map(|x| (x + RATIO_EPS).floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        (col[b] - demand[b] as f64)
            .total_cmp(&(col[a] - demand[a] as f64))
            .then(a.cmp(&b))
    });
    let mut short = units.saturating_sub(demand.iter().sum());
    for &s in order.iter().cycle().take(3 * (short + 1)) {
        if short == 0 {
            break;
        }
        demand[s] += 1;
        short -= 1;
    }
    debug_assert!(total == 0 || demand.iter().sum::<usize>() == units);

    // augmenting paths: source -> class (cap leftover) -> split (cap 1) -> sink (cap demand)
    let n_classes = counts.len();
    let mut given = vec![[false; 3]; n_classes];
    let mut remaining = leftover.clone();
    let mut open = demand;
    loop {
        // BFS from classes with spare units through (class -> split) edges,
        // walking back along (split -> class) reversals of existing units.
        let mut prev_split: Vec<Option<usize>> = vec![None; n_classes];
        let mut split_from: [Option<usize>; 3] = [None; 3];
        let mut queue: std::collections::VecDeque<usize> = (0..n_classes)
            .filter(|&c| remaining[c] > 0)
            .collect();
        let mut seen = vec![false; n_classes];
        for &c in &queue {
            seen[c] = true;
        }
        let mut target = None;
        while let Some(c) = queue.pop_front() {
            for s in 0..3 {
                if given[c][s] || split_from[s].is_some() || fracs[c][s] <= 0.0 {
                    continue;
                }
                split_from[s] = Some(c);
                if open[s] > 0 {
                    target = Some(s);
                    break;
                }
                for c2 in 0..n_classes {
                    if given[c2][s] && !seen[c2] {
                        seen[c2] = true;
                        prev_split[c2] = Some(s);
                        queue.push_back(c2);
                    }
                }
            }
            if target.is_some() {
                break;
            }
        }
        let Some(mut s) = target else { break };
        open[s] -= 1;
        loop {
            let c = split_from[s].expect("path recorded");
            given[c][s] = true;
            match prev_split[c] {
                Some(s_prev) => {
                    given[c][s_prev] = false;
                    s = s_prev;
                }
                None => {
                    remaining[c] -= 1;
                    break;
                }
            }
        }
    }
    for (c, size) in sizes.iter_mut().enumerate() {
        for s in 0..3 {
            size[s] += given[c][s] as usize;
        }
        // anything the flow could not place goes to the last non-empty share
        if remaining[c] > 0 {
            let s = (0..3).rev().find(|&s| ratios[s] > 0.0).unwrap_or(2);
            size[s] += remaining[c];
        }
    }
    sizes
}

/// Stratified split of `labels` by `[train, validation, test]` ratios.
///
/// Classes with fewer than `min_per_class` samples are dropped and the rest
/// renumbered densely. Per split, each class receives the floor of its exact
/// share plus at most one extra sample so that split totals match the
/// global ratios.
pub fn make_splits(
    labels: &[usize],
    ratios: [f64; 3],
    min_per_class: usize,
    seed: u64,
) -> Result<SplitOutcome> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    if min_per_class == 0 {
        return Err(Error::InvalidArgument("min_per_class must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut new_label = vec![None; n_classes];
    let mut retained_classes = Vec::new();
    let mut groups = Vec::new();
    for (class, idx) in by_class {
        if idx.len() >= min_per_class {
            new_label[class] = Some(retained_classes.len());
            retained_classes.push(class);
            groups.push(idx);
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyDataset { min_per_class });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
    }
    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let sizes = allocate(&counts, ratios);

    let mut spec = SplitSpec {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (c, g) in groups.iter().enumerate() {
        let [tr, va, _] = sizes[c];
        spec.train.extend_from_slice(&g[..tr]);
        spec.validation.extend_from_slice(&g[tr..tr + va]);
        spec.test.extend_from_slice(&g[tr + va..]);
    }
    spec.train.sort_unstable();
    spec.validation.sort_unstable();
    spec.test.sort_unstable();
    Ok(SplitOutcome {
        spec,
        retained_classes,
        new_label,
        min_per_class,
    })
}

/// One class-balanced epoch over positions into `labels`.
///
/// Every class is drawn as often as the largest class: each of its samples
/// once, topped up with uniform with-replacement draws. The epoch is then
/// shuffled.
pub fn oversample_indices(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let target = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target * by_class.len());
    for idx in by_class.values() {
        out.extend_from_slice(idx);
        for _ in idx.len()..target {
            out.push(idx[rng.random_range(0..idx.len())]);
        }
    }
    out.shuffle(&mut rng);
    out
}
