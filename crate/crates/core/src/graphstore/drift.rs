use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::inject::inject_cross_community;
use super::snapshot::{init_features, train_count_for};
use super::{GraphError, Result, Snapshot, SnapshotSequence};
use crate::rng::{self, derive_seed};

/// Feature random walk `X^t = X^{t−1} + σ·ε^t`, `ε^t ~ N(0, I)` per entry.
/// Snapshot 0 keeps its features.
pub fn nds_perturb(seq: &SnapshotSequence, sigma: f64, seed: u64) -> Result<SnapshotSequence> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(GraphError::Config(format!(
            "drift sigma must be >= 0, got {sigma}"
        )));
    }
    let mut out = seq.clone();
    let Some(first) = seq.snapshots.first() else {
        return Ok(out);
    };
    let mut current = Arc::clone(&first.features);
    for snap in out.snapshots.iter_mut().skip(1) {
        if sigma > 0.0 {
            let mut r = rng::rng(derive_seed(seed, "nds", snap.index as u64));
            let mut next = (*current).clone();
            for v in next.data_mut() {
                let e: f64 = StandardNormal.sample(&mut r);
                *v += sigma * e;
            }
            current = Arc::new(next);
        }
        snap.features = Arc::clone(&current);
    }
    Ok(out)
}

/// Two-community dynamic graph with drifting features and cross-community
/// anomalies injected into the test half.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_snapshots: usize,
    pub edges_per_snapshot: usize,
    pub dim: usize,
    /// Standard deviation of the per-snapshot feature drift.
    pub drift_sigma: f64,
    /// Fraction of anomalous edges injected into each test snapshot.
    pub anomaly_ratio: f64,
    /// Probability of a normal cross-community edge in the last snapshot;
    /// grows linearly from zero at the first snapshot.
    pub leak_max: f64,
    /// Offset of each community's feature centroid from the origin.
    pub community_separation: f64,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 500,
            n_snapshots: 20,
            edges_per_snapshot: 1000,
            dim: 16,
            drift_sigma: 0.5,
            anomaly_ratio: 0.1,
            leak_max: 0.02,
            community_separation: 3.0,
            train_ratio: 0.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 20 {
            return Err(GraphError::Config(
                "synthetic benchmark needs at least 20 nodes".into(),
            ));
        }
        if self.n_snapshots < 4 {
            return Err(GraphError::Config(
                "synthetic benchmark needs at least 4 snapshots".into(),
            ));
        }
        if self.edges_per_snapshot == 0 || self.dim == 0 {
            return Err(GraphError::Config(
                "edges_per_snapshot and dim must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.leak_max) {
            return Err(GraphError::Config(format!(
                "leak_max {} outside [0,1]",
                self.leak_max
            )));
        }
        train_count_for(self.train_ratio, self.n_snapshots)?;
        Ok(())
    }

    /// Community of node `i`: the first half of the ids is community 0.
    pub fn community_of(&self, node: usize) -> u8 {
        u8::from(node >= self.n_nodes / 2)
    }

    pub fn communities(&self) -> Vec<u8> {
        (0..self.n_nodes).map(|i| self.community_of(i)).collect()
    }
}

pub fn synth_nds_benchmark(cfg: &SynthConfig) -> Result<SnapshotSequence> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let half = n / 2;
    let communities = cfg.communities();

    let mut base = init_features(n, cfg.dim, derive_seed(cfg.seed, "synth-features", 0));
    if cfg.community_separation != 0.0 {
        let direction = init_features(1, cfg.dim, derive_seed(cfg.seed, "synth-direction", 0));
        for i in 0..n {
            let sign = if communities[i] == 0 { 1.0 } else { -1.0 };
            for (v, u) in base.row_mut(i).iter_mut().zip(direction.row(0)) {
                *v += sign * cfg.community_separation * u;
            }
        }
    }
    let features = Arc::new(base);

    let mut snapshots = Vec::with_capacity(cfg.n_snapshots);
    for t in 0..cfg.n_snapshots {
        let mut r = rng::rng(derive_seed(cfg.seed, "synth-edges", t as u64));
        let leak = cfg.leak_max * t as f64 / (cfg.n_snapshots - 1) as f64;
        let mut edges = Vec::with_capacity(cfg.edges_per_snapshot);
        while edges.len() < cfg.edges_per_snapshot {
            let (a, b) = if leak > 0.0 && r.random_bool(leak) {
                let a = r.random_range(0..half);
                let b = r.random_range(half..n);
                if r.random_bool(0.5) {
                    (a, b)
                } else {
                    (b, a)
                }
            } else {
                let (lo, hi) = if r.random_bool(0.5) {
                    (0, half)
                } else {
                    (half, n)
                };
                (r.random_range(lo..hi), r.random_range(lo..hi))
            };
            if a != b {
                edges.push((a, b));
            }
        }
        snapshots.push(Snapshot::new(t, n, edges, Arc::clone(&features)));
    }
    let train_count = train_count_for(cfg.train_ratio, cfg.n_snapshots)?;
    let seq = SnapshotSequence {
        snapshots,
        train_count,
        num_nodes: n,
        dim: cfg.dim,
    };
    let mut seq = nds_perturb(
        &seq,
        cfg.drift_sigma,
        derive_seed(cfg.seed, "synth-drift", 0),
    )?;
    for snap in seq.snapshots.iter_mut().skip(train_count) {
        let seed = derive_seed(cfg.seed, "synth-anomalies", snap.index as u64);
        *snap = inject_cross_community(snap, cfg.anomaly_ratio, &communities, seed)?;
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphstore::write_dataset;
    use crate::linalg::Matrix;

    fn feature_delta(a: &Matrix, b: &Matrix) -> Matrix {
        a.sub(b).expect("same shape")
    }

    fn small(sigma: f64, leak: f64) -> SynthConfig {
        SynthConfig {
            n_nodes: 60,
            n_snapshots: 6,
            edges_per_snapshot: 120,
            dim: 4,
            drift_sigma: sigma,
            leak_max: leak,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_sigma_shares_base_features() {
        let seq = synth_nds_benchmark(&small(0.0, 0.0)).unwrap();
        let x0 = &seq.snapshots[0].features;
        assert!(seq.snapshots.iter().all(|s| s.features == *x0));
    }

    #[test]
    fn no_leak_means_no_cross_community_normals() {
        let cfg = small(0.0, 0.0);
        let seq = synth_nds_benchmark(&cfg).unwrap();
        for snap in &seq.snapshots {
            let labels = snap
                .labels
                .clone()
                .unwrap_or_else(|| vec![0; snap.num_edges()]);
            for (&(a, b), &y) in snap.edges.iter().zip(&labels) {
                if y == 0 {
                    assert_eq!(cfg.community_of(a), cfg.community_of(b));
                } else {
                    assert_ne!(cfg.community_of(a), cfg.community_of(b));
                }
            }
        }
    }

    #[test]
    fn test_half_labels() {
        let cfg = small(0.5, 0.02);
        let seq = synth_nds_benchmark(&cfg).unwrap();
        assert_eq!(seq.train_count, 3);
        assert!(seq.train().iter().all(|s| s.labels.is_none()));
        for s in seq.test() {
            assert_eq!(s.anomaly_count(), 12);
            assert_eq!(s.num_edges(), 132);
        }
    }

    #[test]
    fn deterministic_serialization() {
        let cfg = small(0.5, 0.02);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&synth_nds_benchmark(&cfg).unwrap(), a.path()).unwrap();
        write_dataset(&synth_nds_benchmark(&cfg).unwrap(), b.path()).unwrap();
        for entry in std::fs::read_dir(a.path()).unwrap() {
            let entry = entry.unwrap();
            if entry.path().is_file() {
                let other = b.path().join(entry.file_name());
                assert_eq!(
                    std::fs::read(entry.path()).unwrap(),
                    std::fs::read(other).unwrap()
                );
            }
        }
    }

    #[test]
    fn drift_variance_grows_linearly() {
        let base = SnapshotSequence {
            snapshots: (0..11)
                .map(|t| Snapshot::new(t, 500, vec![(0, 1)], Arc::new(init_features(500, 16, 1))))
                .collect(),
            train_count: 5,
            num_nodes: 500,
            dim: 16,
        };
        let out = nds_perturb(&base, 0.5, 77).unwrap();
        let delta = feature_delta(&out.snapshots[10].features, &out.snapshots[0].features);
        let n = delta.len() as f64;
        let mean = delta.data().iter().sum::<f64>() / n;
        let var = delta.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 10.0 * 0.25;
        assert!((var - expected).abs() <= 0.1 * expected, "var {var}");
        assert_eq!(out, nds_perturb(&base, 0.5, 77).unwrap());
        let same = nds_perturb(&base, 0.0, 77).unwrap();
        assert!(same
            .snapshots
            .iter()
            .all(|s| s.features == base.snapshots[0].features));
        assert!(nds_perturb(&base, -1.0, 1).is_err());
    }

    #[test]
    fn sigma_grid_accepted() {
        for sigma in [0.2, 0.4, 0.6, 0.8, 1.0] {
            synth_nds_benchmark(&small(sigma, 0.02)).unwrap();
        }
    }
}
