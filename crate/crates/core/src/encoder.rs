//! Spatial-temporal encoder: a graph LSTM whose gates are two-layer GraphSAGE
//! networks, with an extra normalizer state dividing the cell state.

use std::sync::Arc;

use rand::seq::index::sample;

use crate::autodiff::{Adam, ParamStore, Result, SparseRows, Tape, Var};
use crate::graphstore::{Adjacency, Snapshot};
use crate::linalg::Matrix;
use crate::nn::{Gnn2, Mlp2, Scope};
use crate::rng::{self, derive_seed};

/// Floor applied to the normalizer before dividing.
pub const EPS_DIV: f64 = 1e-8;
pub const DEFAULT_NEIGHBOR_K: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub neighbor_k: usize,
    /// Replace the recurrent encoder with a plain two-layer GNN.
    pub simple: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub h: Matrix,
    pub c: Matrix,
    pub n: Matrix,
}

impl EncoderState {
    /// `h = c = 0`, `n = 1`.
    pub fn initial(num_nodes: usize, dim: usize) -> Self {
        Self {
            h: Matrix::zeros(num_nodes, dim),
            c: Matrix::zeros(num_nodes, dim),
            n: Matrix::filled(num_nodes, dim, 1.0),
        }
    }
}

/// Row-mean operator over at most `k` uniformly sampled neighbors per node
/// (all neighbors when the degree is at most `k`).
pub fn neighbor_operator(adj: &Adjacency, k: usize, seed: u64) -> SparseRows {
    let mut r = rng::rng(seed);
    let lists: Vec<Vec<usize>> = (0..adj.num_nodes())
        .map(|i| {
            let nbrs = adj.neighbors(i);
            if nbrs.len() <= k {
                nbrs.to_vec()
            } else {
                let mut picked: Vec<usize> = sample(&mut r, nbrs.len(), k)
                    .into_iter()
                    .map(|j| nbrs[j])
                    .collect();
                picked.sort_unstable();
                picked
            }
        })
        .collect();
    SparseRows::mean_of(adj.num_nodes(), &lists)
}

/// One GraphSAGE layer evaluated directly:
/// `act(h·W_self + mean(sampled neighbors of h)·W_neigh)`.
pub fn sage_layer(
    h: &Matrix,
    adj: &Adjacency,
    self_weight: &Matrix,
    neighbor_weight: &Matrix,
    k: usize,
    relu: bool,
    seed: u64,
) -> Result<Matrix> {
    let agg = neighbor_operator(adj, k, seed).apply(h);
    let out = h.matmul(self_weight)?.add(&agg.matmul(neighbor_weight)?)?;
    Ok(if relu { out.map(|v| v.max(0.0)) } else { out })
}

/// Edge embeddings `z_i + z_j`, one row per edge.
pub fn edge_embed(z: &Matrix, edges: &[(usize, usize)]) -> Matrix {
    let mut out = Matrix::zeros(edges.len(), z.cols());
    for (k, &(i, j)) in edges.iter().enumerate() {
        for ((o, a), b) in out.row_mut(k).iter_mut().zip(z.row(i)).zip(z.row(j)) {
            *o = a + b;
        }
    }
    out
}

/// `‖X̂ − X‖_F² + ‖Â − A‖_F²`.
pub fn recon_loss(x_hat: &Matrix, x: &Matrix, a_hat: &Matrix, a: &Matrix) -> Result<f64> {
    let dx = x_hat.sub(x)?;
    let da = a_hat.sub(a)?;
    let sq = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
    Ok(sq(&dx) + sq(&da))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Gate {
    input: Gnn2,
    hidden: Gnn2,
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Recurrent { feature: Gnn2, gates: [Gate; 4] },
    Simple(Gnn2),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct StateVars {
    pub h: Var,
    pub c: Var,
    pub n: Var,
}

impl StateVars {
    pub fn constants(tape: &mut Tape, s: &EncoderState) -> Self {
        Self {
            h: tape.constant(s.h.clone()),
            c: tape.constant(s.c.clone()),
            n: tape.constant(s.n.clone()),
        }
    }

    pub fn values(&self, tape: &Tape) -> EncoderState {
        EncoderState {
            h: tape.value(self.h).clone(),
            c: tape.value(self.c).clone(),
            n: tape.value(self.n).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    body: Body,
    recon: Mlp2,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Self {
        let mut r = rng::rng(derive_seed(config.seed, "encoder-init", 0));
        let mut store = ParamStore::new();
        let (din, d) = (config.input_dim, config.dim);
        let body = if config.simple {
            Body::Simple(Gnn2::new(&mut store, "enc.simple", (din, d, d), &mut r))
        } else {
            let feature = Gnn2::new(&mut store, "enc.x", (din, d, d), &mut r);
            let gates = ["f", "i", "o", "z"].map(|g| Gate {
                input: Gnn2::new(&mut store, &format!("enc.x{g}"), (d, d, d), &mut r),
                hidden: Gnn2::new(&mut store, &format!("enc.h{g}"), (d, d, d), &mut r),
            });
            Body::Recurrent { feature, gates }
        };
        let recon = Mlp2::new(&mut store, "enc.recon", (d, d, din), true, &mut r);
        Self {
            config,
            store,
            body,
            recon,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn initial_state(&self, num_nodes: usize) -> EncoderState {
        EncoderState::initial(num_nodes, self.config.dim)
    }

    /// Sampled neighbor operator for a snapshot; fixed per snapshot index.
    pub fn operator(&self, snap: &Snapshot) -> Arc<SparseRows> {
        let seed = derive_seed(self.config.seed, "sage", snap.index as u64);
        Arc::new(neighbor_operator(
            &snap.adjacency,
            self.config.neighbor_k,
            seed,
        ))
    }

    pub(crate) fn step_tape(
        &self,
        scope: Scope,
        tape: &mut Tape,
        x: Var,
        cur: &Arc<SparseRows>,
        prev: &Arc<SparseRows>,
        state: StateVars,
    ) -> Result<(Var, StateVars)> {
        match &self.body {
            Body::Simple(gnn) => Ok((gnn.forward(scope, tape, x, Some(cur))?, state)),
            Body::Recurrent { feature, gates } => {
                let xp = feature.forward(scope, tape, x, None)?;
                let mut pre = [xp; 4];
                for (p, gate) in pre.iter_mut().zip(gates) {
                    let a = gate.input.forward(scope, tape, xp, Some(cur))?;
                    let b = gate.hidden.forward(scope, tape, state.h, Some(prev))?;
                    *p = tape.add(a, b)?;
                }
                let f = tape.sigmoid(pre[0]);
                let i = tape.sigmoid(pre[1]);
                let o = tape.sigmoid(pre[2]);
                let z = tape.tanh(pre[3]);
                let fc = tape.hadamard(f, state.c)?;
                let iz = tape.hadamard(i, z)?;
                let c = tape.add(fc, iz)?;
                let fnv = tape.hadamard(f, state.n)?;
                let n = tape.add(fnv, i)?;
                let ratio = tape.elementwise_div(c, n, EPS_DIV)?;
                let h = tape.hadamard(o, ratio)?;
                Ok((h, StateVars { h, c, n }))
            }
        }
    }

    pub(crate) fn recon_loss_tape(
        &self,
        scope: Scope,
        tape: &mut Tape,
        z: Var,
        x: Var,
        a: &Adjacency,
    ) -> Result<Var> {
        let x_hat = self.recon.forward(scope, tape, z)?;
        let zt = tape.transpose(z);
        let logits = tape.matmul(z, zt)?;
        let a_hat = tape.sigmoid(logits);
        let dx = tape.sub(x_hat, x)?;
        let a = tape.constant(a.to_dense());
        let da = tape.sub(a_hat, a)?;
        let lx = tape.frobenius_sq(dx);
        let la = tape.frobenius_sq(da);
        tape.add(lx, la)
    }

    /// One recurrence step with frozen parameters; `Z_node` equals the new `h`
    /// (or the GNN output for the simple encoder).
    pub fn step(
        &self,
        features: &Matrix,
        cur: &Arc<SparseRows>,
        prev: &Arc<SparseRows>,
        state: &EncoderState,
    ) -> Result<(Matrix, EncoderState)> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let s = StateVars::constants(&mut tape, state);
        let (z, s) = self.step_tape(Scope::frozen(&self.store), &mut tape, x, cur, prev, s)?;
        Ok((tape.value(z).clone(), s.values(&tape)))
    }

    /// Runs the recurrence over `snaps` starting from `state`. `prev` is the
    /// operator of the snapshot preceding `snaps[0]`; without one the first
    /// snapshot's own adjacency stands in.
    pub fn encode(
        &self,
        snaps: &[Snapshot],
        state: &mut EncoderState,
        prev: Option<Arc<SparseRows>>,
    ) -> Result<Vec<Matrix>> {
        let mut prev = prev;
        let mut out = Vec::with_capacity(snaps.len());
        for snap in snaps {
            let cur = self.operator(snap);
            let p = prev.unwrap_or_else(|| Arc::clone(&cur));
            let (z, next) = self.step(&snap.features, &cur, &p, state)?;
            *state = next;
            out.push(z);
            prev = Some(cur);
        }
        Ok(out)
    }

    pub fn reconstruct(&self, z: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let x_hat = self
            .recon
            .forward(Scope::frozen(&self.store), &mut tape, zv)?;
        let a_hat = z.matmul_t(z)?.map(crate::autodiff::sigmoid_scalar);
        Ok((tape.value(x_hat).clone(), a_hat))
    }

    /// Reconstruction loss of `snap` after one step from the constant `state`.
    pub(crate) fn train_loss_tape(
        &self,
        scope: Scope,
        tape: &mut Tape,
        snap: &Snapshot,
        cur: &Arc<SparseRows>,
        prev: &Arc<SparseRows>,
        state: &EncoderState,
    ) -> Result<(Var, StateVars)> {
        let x = tape.constant((*snap.features).clone());
        let s = StateVars::constants(tape, state);
        let (z, s) = self.step_tape(scope, tape, x, cur, prev, s)?;
        Ok((self.recon_loss_tape(scope, tape, z, x, &snap.adjacency)?, s))
    }

    /// One Adam update on the reconstruction loss of `snap`, with the incoming
    /// state treated as a constant. Returns the loss and the advanced state.
    pub fn train_step(
        &mut self,
        adam: &mut Adam,
        snap: &Snapshot,
        cur: &Arc<SparseRows>,
        prev: &Arc<SparseRows>,
        state: &EncoderState,
    ) -> Result<(f64, EncoderState)> {
        let mut tape = Tape::new();
        let (loss, s) =
            self.train_loss_tape(Scope::train(&self.store), &mut tape, snap, cur, prev, state)?;
        tape.backward(loss, &mut self.store)?;
        adam.step(&mut self.store);
        Ok((tape.value(loss).item(), s.values(&tape)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;

    fn cfg(simple: bool) -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            dim: 4,
            neighbor_k: 10,
            simple,
            seed: 5,
        }
    }

    fn ring(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    }

    fn snapshot(n: usize, t: usize) -> Snapshot {
        let x = crate::graphstore::init_features(n, 3, 9);
        Snapshot::new(t, n, ring(n), Arc::new(x))
    }

    #[test]
    fn sage_without_neighbors_is_self_transform() {
        let h = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        let ws = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let wn = Matrix::filled(2, 2, 7.0);
        let adj = Adjacency::new(2, &[]);
        let out = sage_layer(&h, &adj, &ws, &wn, 10, true, 1).unwrap();
        assert_eq!(out, h.matmul(&ws).unwrap().map(|v| v.max(0.0)));
    }

    #[test]
    fn sage_single_neighbor_identity() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![5.0, -1.0]]).unwrap();
        let adj = Adjacency::new(2, &[(0, 1)]);
        let i = Matrix::identity(2);
        let out = sage_layer(&h, &adj, &i, &i, 10, false, 1).unwrap();
        assert_eq!(out.row(0), &[6.0, 1.0]);
        assert_eq!(out.row(1), &[6.0, 1.0]);
    }

    #[test]
    fn sage_seed_irrelevant_when_k_covers_degree() {
        let mut r = rng::rng(3);
        let edges: Vec<(usize, usize)> = (0..60)
            .map(|_| {
                (
                    rand::Rng::random_range(&mut r, 0..20),
                    rand::Rng::random_range(&mut r, 0..20),
                )
            })
            .collect();
        let adj = Adjacency::new(20, &edges);
        let h = crate::graphstore::init_features(20, 3, 1);
        let w = crate::autodiff::glorot_uniform(3, 3, &mut r);
        let k = adj.max_degree();
        let a = sage_layer(&h, &adj, &w, &w, k, true, 1).unwrap();
        let b = sage_layer(&h, &adj, &w, &w, k, true, 2).unwrap();
        assert_eq!(a, b);
        let c = sage_layer(&h, &adj, &w, &w, 1, true, 1).unwrap();
        let d = sage_layer(&h, &adj, &w, &w, 1, true, 2).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn neighbor_sampling_caps_at_k() {
        let edges: Vec<(usize, usize)> = (1..30).map(|j| (0, j)).collect();
        let adj = Adjacency::new(30, &edges);
        let op = neighbor_operator(&adj, 10, 4);
        assert_eq!(op.row_entries(0).count(), 10);
        assert!(op.row_entries(0).all(|(_, w)| (w - 0.1).abs() < 1e-15));
        assert_eq!(op.row_entries(5).count(), 1);
    }

    #[test]
    fn zero_weights_recurrence() {
        let mut enc = Encoder::new(cfg(false));
        for id in enc.store.ids().collect::<Vec<_>>() {
            enc.store.value_mut(id).data_mut().fill(0.0);
        }
        let snap = snapshot(5, 0);
        let op = enc.operator(&snap);
        let mut s0 = enc.initial_state(5);
        s0.c = Matrix::filled(5, 4, 0.8);
        let (z, s1) = enc.step(&snap.features, &op, &op, &s0).unwrap();
        for v in s1.c.data() {
            assert!((v - 0.4).abs() < 1e-15);
        }
        for v in s1.n.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        for v in z.data() {
            assert!((v - 0.5 * 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn normalizer_positive_and_hidden_bounded() {
        let enc = Encoder::new(cfg(false));
        let snap = snapshot(12, 0);
        let op = enc.operator(&snap);
        let mut s = enc.initial_state(12);
        let (_, s1) = enc.step(&snap.features, &op, &op, &s).unwrap();
        assert!(s1.n.data().iter().all(|&v| v > 0.0 && v < 2.0));
        for _ in 0..100 {
            let (z, next) = enc.step(&snap.features, &op, &op, &s).unwrap();
            assert!(next.n.data().iter().all(|&v| v > 0.0));
            assert!(z.is_finite());
            let bound = next
                .c
                .data()
                .iter()
                .zip(next.n.data())
                .map(|(c, n)| (c / n).abs())
                .fold(0.0, f64::max);
            assert!(z.max_abs() <= bound + 1e-12);
            s = next;
        }
    }

    #[test]
    fn edge_embedding_properties() {
        let z = Matrix::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![-1.0, 0.0, 0.0],
        ])
        .unwrap();
        let e = edge_embed(&z, &[(1, 2), (2, 1), (1, 3)]);
        assert_eq!(e.row(0), &[1.0, 1.0, 0.0]);
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn reconstruction_properties() {
        let enc = Encoder::new(cfg(false));
        let (x_hat, a_hat) = enc.reconstruct(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(x_hat.shape(), (4, 3));
        assert!(a_hat.data().iter().all(|&v| v == 0.5));
        let (_, a_hat) = enc.reconstruct(&Matrix::identity(4)).unwrap();
        assert_eq!(a_hat, a_hat.transpose());
        assert!((a_hat[(2, 2)] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let z = crate::graphstore::init_features(6, 4, 2);
        let (_, a_hat) = enc.reconstruct(&z).unwrap();
        assert_eq!(a_hat, a_hat.transpose());
        assert!(a_hat.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn recon_loss_arithmetic() {
        let x = Matrix::filled(2, 2, 1.0);
        let a = Matrix::identity(2);
        assert_eq!(recon_loss(&x, &x, &a, &a).unwrap(), 0.0);
        assert_eq!(
            recon_loss(&Matrix::filled(2, 2, 2.0), &x, &a, &a).unwrap(),
            4.0
        );
        assert!(recon_loss(&x, &Matrix::zeros(3, 2), &a, &a).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let run = || {
            let mut enc = Encoder::new(cfg(false));
            let mut adam = Adam::new(&enc.store, AdamConfig::with_lr(1e-2));
            let snap = snapshot(10, 0);
            let op = enc.operator(&snap);
            let mut losses = Vec::new();
            for _ in 0..30 {
                let s = enc.initial_state(10);
                let (l, _) = enc.train_step(&mut adam, &snap, &op, &op, &s).unwrap();
                losses.push(l);
            }
            (losses, enc.store.value_bytes())
        };
        let (a, bytes_a) = run();
        let (_, bytes_b) = run();
        assert!(a.last().unwrap() < &a[0]);
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn simple_encoder_ignores_state() {
        let enc = Encoder::new(cfg(true));
        let snap = snapshot(6, 0);
        let op = enc.operator(&snap);
        let s = enc.initial_state(6);
        let (z1, s1) = enc.step(&snap.features, &op, &op, &s).unwrap();
        let (z2, _) = enc.step(&snap.features, &op, &op, &s1).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(s1, s);
    }
}
