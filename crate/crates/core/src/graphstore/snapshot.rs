use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use super::{EdgeEvent, GraphError, Result, Snapshot, SnapshotSequence};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    /// Events per snapshot.
    pub snapshot_size: usize,
    /// Fraction of snapshots used for training.
    pub train_ratio: f64,
    /// Seed for feature initialization.
    pub seed: u64,
    /// Width of the initialized node features.
    pub feature_dim: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            snapshot_size: 1000,
            train_ratio: 0.5,
            seed: 1,
            feature_dim: 32,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snapshot_size == 0 {
            return Err(GraphError::Config(
                "snapshot_size must be at least 1".into(),
            ));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(GraphError::Config(format!(
                "train_ratio must lie strictly between 0 and 1, got {}",
                self.train_ratio
            )));
        }
        if self.feature_dim == 0 {
            return Err(GraphError::Config("feature_dim must be at least 1".into()));
        }
        Ok(())
    }
}

pub(super) fn train_count_for(ratio: f64, total: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(GraphError::Config(format!(
            "train_ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    if total < 2 {
        return Err(GraphError::Config(format!(
            "{total} snapshot(s) cannot be split"
        )));
    }
    let k = (ratio * total as f64).floor() as usize;
    Ok(k.clamp(1, total - 1))
}

/// Seeded Gaussian rows scaled to unit L2 norm.
pub fn init_features(n: usize, d: usize, seed: u64) -> Matrix {
    let mut r = rng::rng(seed);
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        let row = m.row_mut(i);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut r);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    m
}

/// Cuts `events` into consecutive blocks of `cfg.snapshot_size`; a trailing
/// partial block becomes the last snapshot. Every snapshot shares the same
/// initialized feature matrix.
pub fn build_snapshots(
    events: &[EdgeEvent],
    num_nodes: usize,
    cfg: &SplitConfig,
) -> Result<SnapshotSequence> {
    let features = init_features(num_nodes, cfg.feature_dim, cfg.seed);
    build_snapshots_with_features(events, num_nodes, cfg, features)
}

pub fn build_snapshots_with_features(
    events: &[EdgeEvent],
    num_nodes: usize,
    cfg: &SplitConfig,
    features: Matrix,
) -> Result<SnapshotSequence> {
    cfg.validate()?;
    if events.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    if features.rows() != num_nodes {
        return Err(GraphError::Config(format!(
            "feature matrix has {} rows for {num_nodes} nodes",
            features.rows()
        )));
    }
    let dim = features.cols();
    let features = Arc::new(features);
    let snapshots: Vec<Snapshot> = events
        .chunks(cfg.snapshot_size)
        .enumerate()
        .map(|(t, block)| {
            let edges = block.iter().map(|e| (e.src, e.dst)).collect();
            Snapshot::new(t, num_nodes, edges, Arc::clone(&features))
        })
        .collect();
    if snapshots.len() < 2 {
        return Err(GraphError::TooFewEvents {
            events: events.len(),
            snapshots: snapshots.len(),
        });
    }
    let train_count = train_count_for(cfg.train_ratio, snapshots.len())?;
    Ok(SnapshotSequence {
        train_count,
        num_nodes,
        dim,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn events(n: usize, nodes: usize) -> Vec<EdgeEvent> {
        (0..n)
            .map(|i| EdgeEvent {
                src: i % nodes,
                dst: (i * 7 + 1) % nodes,
                time: i as u64,
            })
            .filter(|e| e.src != e.dst)
            .collect()
    }

    fn cfg(size: usize, ratio: f64) -> SplitConfig {
        SplitConfig {
            snapshot_size: size,
            train_ratio: ratio,
            seed: 3,
            feature_dim: 4,
        }
    }

    #[test]
    fn block_sizes() {
        let ev: Vec<EdgeEvent> = (0..2500)
            .map(|i| EdgeEvent {
                src: i % 50,
                dst: (i % 50 + 1) % 50,
                time: i as u64,
            })
            .collect();
        let seq = build_snapshots(&ev, 50, &cfg(1000, 0.5)).unwrap();
        let sizes: Vec<usize> = seq.snapshots.iter().map(Snapshot::num_edges).collect();
        assert_eq!(sizes, vec![1000, 1000, 500]);
        assert_eq!(seq.total_edges(), 2500);
        let flat: Vec<(usize, usize)> =
            seq.snapshots.iter().flat_map(|s| s.edges.clone()).collect();
        let orig: Vec<(usize, usize)> = ev.iter().map(|e| (e.src, e.dst)).collect();
        assert_eq!(flat, orig);
    }

    #[test]
    fn uci_sized_split() {
        let ev: Vec<EdgeEvent> = (0..13_838)
            .map(|i| EdgeEvent {
                src: i % 1899,
                dst: (i + 1) % 1899,
                time: i as u64,
            })
            .collect();
        let seq = build_snapshots(&ev, 1899, &cfg(1000, 0.5)).unwrap();
        assert_eq!(seq.len(), 14);
        assert_eq!(seq.train_count, 7);
    }

    #[test]
    fn train_count_floor_and_clamp() {
        assert_eq!(train_count_for(0.99, 3).unwrap(), 2);
        assert_eq!(train_count_for(0.01, 3).unwrap(), 1);
        assert!(train_count_for(1.5, 3).is_err());
    }

    #[test]
    fn too_few_events() {
        let ev = events(10, 5);
        assert!(matches!(
            build_snapshots(&ev, 5, &cfg(1000, 0.5)),
            Err(GraphError::TooFewEvents { .. })
        ));
    }

    #[test]
    fn features_unit_norm_and_seeded() {
        let a = init_features(50, 8, 7);
        for r in 0..50 {
            let n: f64 = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(a, init_features(50, 8, 7));
        let b = init_features(50, 8, 8);
        let differing = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing as f64 >= 0.99 * a.len() as f64);
    }
}
