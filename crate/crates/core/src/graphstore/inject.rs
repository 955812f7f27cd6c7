use rand::Rng;

use super::{Adjacency, GraphError, Result, Snapshot, SnapshotSequence};
use crate::rng::{self, derive_seed};

/// Bounds of the augmentation ratio drawn per training snapshot.
pub const AUGMENT_MIN: f64 = 0.01;
pub const AUGMENT_MAX: f64 = 0.10;

const ATTEMPTS_PER_EDGE: usize = 1000;

/// Edge list with 0/1 labels (1 = anomalous or pseudo-anomalous).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEdges {
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
}

fn injection_count(ratio: f64, edges: usize) -> usize {
    // Guard against 0.07 * 100 = 7.000000000000001 rounding up to 8.
    (ratio * edges as f64 - 1e-9).ceil().max(0.0) as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 0.5) {
        return Err(GraphError::Config(format!(
            "injection ratio must lie in (0, 0.5], got {ratio}"
        )));
    }
    Ok(())
}

/// Samples `count` distinct node pairs that are absent from `adjacency` and
/// satisfy `accept`; `accepted_pairs` is the number of unordered pairs
/// accepted by the predicate in the complete graph. Chosen pairs are inserted
/// into `adjacency`.
fn place_edges(
    adjacency: &mut Adjacency,
    count: usize,
    r: &mut rng::Rng,
    accept: impl Fn(usize, usize) -> bool,
    accepted_pairs: usize,
) -> Result<Vec<(usize, usize)>> {
    let n = adjacency.num_nodes();
    let present = (0..n)
        .flat_map(|i| adjacency.neighbors(i).iter().map(move |&j| (i, j)))
        .filter(|&(i, j)| i < j && accept(i, j))
        .count();
    let available = accepted_pairs.saturating_sub(present);
    if count > available {
        return Err(GraphError::SaturatedGraph {
            needed: count,
            available,
        });
    }
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    if count * 2 > available {
        // Dense regime: enumerate the eligible pairs and draw without replacement.
        let mut pool: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| accept(i, j) && !adjacency.contains(i, j))
            .collect();
        for k in 0..count {
            let pick = r.random_range(k..pool.len());
            pool.swap(k, pick);
            let (i, j) = pool[k];
            let pair = if r.random_bool(0.5) { (i, j) } else { (j, i) };
            adjacency.insert(i, j);
            out.push(pair);
        }
        return Ok(out);
    }
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > ATTEMPTS_PER_EDGE * count.max(1) {
            return Err(GraphError::SaturatedGraph {
                needed: count,
                available: available - out.len(),
            });
        }
        let i = r.random_range(0..n);
        let j = r.random_range(0..n);
        if i == j || !accept(i, j) || adjacency.contains(i, j) {
            continue;
        }
        adjacency.insert(i, j);
        out.push((i, j));
    }
    Ok(out)
}

fn with_injected(snap: &Snapshot, injected: Vec<(usize, usize)>, adjacency: Adjacency) -> Snapshot {
    let mut labels = snap
        .labels
        .clone()
        .unwrap_or_else(|| vec![0; snap.edges.len()]);
    let mut edges = snap.edges.clone();
    labels.extend(std::iter::repeat_n(1u8, injected.len()));
    edges.extend(injected);
    Snapshot {
        index: snap.index,
        edges,
        adjacency,
        features: snap.features.clone(),
        labels: Some(labels),
    }
}

fn all_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Adds `ceil(ratio·|E|)` uniformly sampled non-edges labeled anomalous.
pub fn inject_anomalies(snap: &Snapshot, ratio: f64, seed: u64) -> Result<Snapshot> {
    check_ratio(ratio)?;
    let count = injection_count(ratio, snap.num_edges());
    let mut adjacency = snap.adjacency.clone();
    let mut r = rng::rng(seed);
    let n = snap.num_nodes();
    let injected = place_edges(&mut adjacency, count, &mut r, |_, _| true, all_pairs(n))?;
    Ok(with_injected(snap, injected, adjacency))
}

/// Like [`inject_anomalies`] but only places edges between different
/// communities (`community[i] != community[j]`).
pub fn inject_cross_community(
    snap: &Snapshot,
    ratio: f64,
    community: &[u8],
    seed: u64,
) -> Result<Snapshot> {
    check_ratio(ratio)?;
    let n = snap.num_nodes();
    if community.len() != n {
        return Err(GraphError::Config(format!(
            "{} community labels for {n} nodes",
            community.len()
        )));
    }
    let ones = community.iter().filter(|&&c| c == 1).count();
    let count = injection_count(ratio, snap.num_edges());
    let mut adjacency = snap.adjacency.clone();
    let mut r = rng::rng(seed);
    let injected = place_edges(
        &mut adjacency,
        count,
        &mut r,
        |i, j| community[i] != community[j],
        ones * (n - ones),
    )?;
    Ok(with_injected(snap, injected, adjacency))
}

/// Draws `α ~ U[AUGMENT_MIN, AUGMENT_MAX]` and injects that fraction of
/// synthetic edges. Returns the augmented snapshot and the drawn `α`.
pub fn augment_training(snap: &Snapshot, seed: u64) -> Result<(Snapshot, f64)> {
    let mut r = rng::rng(seed);
    let alpha = r.random_range(AUGMENT_MIN..=AUGMENT_MAX);
    let augmented = inject_anomalies(snap, alpha, derive_seed(seed, "augment-edges", 0))?;
    Ok((augmented, alpha))
}

/// Injects anomalies into every test snapshot of `seq`.
pub fn label_test_snapshots(
    seq: &SnapshotSequence,
    ratio: f64,
    seed: u64,
) -> Result<SnapshotSequence> {
    let mut out = seq.clone();
    for snap in out.snapshots.iter_mut().skip(seq.train_count) {
        *snap = inject_anomalies(snap, ratio, derive_seed(seed, "inject", snap.index as u64))?;
    }
    Ok(out)
}

/// Original edges (label 0) followed by `round(ratio·|E|)` pseudo-anomalies
/// (label 1). Each pseudo-anomaly is, with equal probability, a uniformly
/// random non-edge or an existing edge whose destination was replaced by a
/// random node so that the result is a non-edge.
pub fn negative_sample(snap: &Snapshot, ratio: f64, seed: u64) -> Result<LabeledEdges> {
    if !(ratio > 0.0) {
        return Err(GraphError::Config(format!(
            "negative sampling ratio must be positive, got {ratio}"
        )));
    }
    let n = snap.num_nodes();
    let adj = &snap.adjacency;
    let available = all_pairs(n).saturating_sub(adj.num_pairs());
    let count = (ratio * snap.num_edges() as f64).round() as usize;
    if count > 0 && available == 0 {
        return Err(GraphError::SaturatedGraph {
            needed: count,
            available,
        });
    }
    let mut r = rng::rng(seed);
    let mut edges = snap.edges.clone();
    let mut labels = vec![0u8; edges.len()];
    let random_non_edge = |r: &mut rng::Rng| -> Result<(usize, usize)> {
        for _ in 0..ATTEMPTS_PER_EDGE * 10 {
            let i = r.random_range(0..n);
            let j = r.random_range(0..n);
            if i != j && !adj.contains(i, j) {
                return Ok((i, j));
            }
        }
        Err(GraphError::SaturatedGraph {
            needed: 1,
            available,
        })
    };
    for _ in 0..count {
        let pair = if snap.edges.is_empty() || r.random_bool(0.5) {
            random_non_edge(&mut r)?
        } else {
            match perturb_destination(snap, &mut r) {
                Some(p) => p,
                None => random_non_edge(&mut r)?,
            }
        };
        edges.push(pair);
        labels.push(1);
    }
    Ok(LabeledEdges { edges, labels })
}

/// Replaces the destination of a random existing edge so that the result is a
/// non-edge; `None` after repeated failures.
fn perturb_destination(snap: &Snapshot, r: &mut rng::Rng) -> Option<(usize, usize)> {
    let n = snap.num_nodes();
    for _ in 0..ATTEMPTS_PER_EDGE {
        let (src, _) = snap.edges[r.random_range(0..snap.edges.len())];
        let w = r.random_range(0..n);
        if w != src && !snap.adjacency.contains(src, w) {
            return Some((src, w));
        }
    }
    None
}
