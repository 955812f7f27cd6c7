//! Dynamic-graph data model: edge events, fixed-size snapshots, features and
//! the randomized edge generators used for augmentation, negative sampling
//! and test-time anomaly injection.

mod drift;
mod inject;
mod io;
mod parse;
mod snapshot;

use std::sync::Arc;

use thiserror::Error;

use crate::linalg::Matrix;

pub use drift::{nds_perturb, synth_nds_benchmark, SynthConfig};
pub use inject::{
    augment_training, inject_anomalies, inject_cross_community, label_test_snapshots,
    negative_sample, LabeledEdges, AUGMENT_MAX, AUGMENT_MIN,
};
pub use io::{load_features, read_dataset, write_dataset, write_features};
pub use parse::{parse_edge_list, EdgeList};
pub use snapshot::{build_snapshots, build_snapshots_with_features, init_features, SplitConfig};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("edge list contains no edges")]
    EmptyInput,
    #[error("only {snapshots} snapshot(s) from {events} events; at least 2 are required")]
    TooFewEvents { events: usize, snapshots: usize },
    #[error("cannot place {needed} new edges: only {available} eligible node pairs remain")]
    SaturatedGraph { needed: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EdgeEvent {
    pub src: usize,
    pub dst: usize,
    pub time: u64,
}

/// Symmetric 0/1 adjacency stored as sorted neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(s, d) in edges {
            if s != d {
                neighbors[s].push(d);
                neighbors[d].push(s);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Self { neighbors }
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Number of distinct undirected node pairs present.
    pub fn num_pairs(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub(crate) fn insert(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for (x, y) in [(a, b), (b, a)] {
            if let Err(pos) = self.neighbors[x].binary_search(&y) {
                self.neighbors[x].insert(pos, y);
            }
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.neighbors.len();
        let mut m = Matrix::zeros(n, n);
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                m[(i, j)] = 1.0;
            }
        }
        m
    }
}

/// One graph snapshot `G^t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub index: usize,
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Adjacency,
    pub features: Arc<Matrix>,
    /// Per-edge labels (1 = anomalous), present on test and augmented snapshots.
    pub labels: Option<Vec<u8>>,
}

impl Snapshot {
    pub fn new(
        index: usize,
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Arc<Matrix>,
    ) -> Self {
        let adjacency = Adjacency::new(num_nodes, &edges);
        Self {
            index,
            edges,
            adjacency,
            features,
            labels: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.num_nodes()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels
            .as_ref()
            .map_or(0, |l| l.iter().filter(|&&y| y == 1).count())
    }

    /// Indices of edges labeled normal (all edges when unlabeled).
    pub fn normal_edge_indices(&self) -> Vec<usize> {
        match &self.labels {
            Some(labels) => (0..self.edges.len()).filter(|&i| labels[i] == 0).collect(),
            None => (0..self.edges.len()).collect(),
        }
    }
}

/// Ordered snapshots over a shared node universe; the first `train_count` form
/// the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSequence {
    pub snapshots: Vec<Snapshot>,
    pub train_count: usize,
    pub num_nodes: usize,
    pub dim: usize,
}

impl SnapshotSequence {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn train(&self) -> &[Snapshot] {
        &self.snapshots[..self.train_count]
    }

    pub fn test(&self) -> &[Snapshot] {
        &self.snapshots[self.train_count..]
    }

    pub fn total_edges(&self) -> usize {
        self.snapshots.iter().map(Snapshot::num_edges).sum()
    }

    pub fn has_test_labels(&self) -> bool {
        self.test().iter().any(|s| s.labels.is_some())
    }

    /// Same sequence with a different split point, clamped to `[1, len−1]`.
    pub fn with_train_ratio(&self, ratio: f64) -> Result<Self> {
        let k = snapshot::train_count_for(ratio, self.len())?;
        Ok(Self {
            train_count: k,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_symmetric_zero_diagonal() {
        let adj = Adjacency::new(4, &[(0, 1), (1, 0), (2, 3), (2, 2)]);
        let d = adj.to_dense();
        assert_eq!(d, d.transpose());
        assert!((0..4).all(|i| d[(i, i)] == 0.0));
        assert_eq!(adj.num_pairs(), 2);
        assert!(adj.contains(1, 0) && adj.contains(3, 2) && !adj.contains(0, 2));
    }

    #[test]
    fn adjacency_insert_keeps_order() {
        let mut adj = Adjacency::new(5, &[(0, 4)]);
        adj.insert(0, 2);
        adj.insert(2, 0);
        assert_eq!(adj.neighbors(0), &[2, 4]);
        assert_eq!(adj.neighbors(2), &[0]);
    }
}
