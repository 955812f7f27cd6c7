//! Normal statistics estimation: Gaussian statistics of edge-embedding
//! populations, prediction of the overall-to-normal deviation, PD recovery of
//! the normal covariance, a GRU tracking how the normal statistics evolve, and
//! whitening.

use thiserror::Error;

use crate::autodiff::{glorot_uniform, Adam, AutodiffError, ParamId, ParamStore, Tape, Var};
use crate::linalg::{
    cholesky, flatten_lower, inv_sqrt, tri_len, unflatten_lower, LinalgError, Matrix, Vector,
};
use crate::nn::{Mlp2, Scope};
use crate::rng::{self, derive_seed};

/// Jitter added to every covariance before factorizing.
pub const EPS_JITTER: f64 = crate::linalg::EPS_JITTER;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NsemError {
    #[error("statistics need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NsemError>;

/// Mean and covariance of an embedding population, with the Cholesky factor of
/// `sigma + ε_jit·I` cached.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: Vector,
    pub sigma: Matrix,
    pub chol: Matrix,
}

impl GaussianStats {
    pub fn new(mu: Vector, sigma: Matrix) -> Result<Self> {
        if sigma.rows() != mu.len() || sigma.cols() != mu.len() {
            return Err(NsemError::ShapeMismatch(format!(
                "mean of length {} with {}x{} covariance",
                mu.len(),
                sigma.rows(),
                sigma.cols()
            )));
        }
        let chol = cholesky(&sigma.add_diagonal(EPS_JITTER))?;
        Ok(Self { mu, sigma, chol })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Same statistics with the jitter folded into `sigma`.
    pub fn jittered(&self) -> Self {
        let sigma = self.chol.matmul_t(&self.chol).expect("square factor");
        Self {
            mu: self.mu.clone(),
            sigma,
            chol: self.chol.clone(),
        }
    }

    /// GRU input `μ ⊕ flatten_lower(chol)`.
    pub fn summary(&self) -> Vec<f64> {
        let mut v = self.mu.as_slice().to_vec();
        v.extend(flatten_lower(&self.chol).into_inner());
        v
    }
}

/// Row mean and biased (divide-by-m) covariance of `embeddings`.
pub fn edge_stats(embeddings: &Matrix) -> Result<GaussianStats> {
    let m = embeddings.rows();
    if m < 2 {
        return Err(NsemError::TooFewSamples(m));
    }
    let mu = embeddings.column_means();
    let d = embeddings.cols();
    let mut centered = embeddings.clone();
    for r in 0..m {
        for (v, u) in centered.row_mut(r).iter_mut().zip(mu.as_slice()) {
            *v -= u;
        }
    }
    let mut sigma = centered.t_matmul(&centered)?.scale(1.0 / m as f64);
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma.data_mut()[i * d + j] = s;
            sigma.data_mut()[j * d + i] = s;
        }
    }
    GaussianStats::new(mu, sigma)
}

/// `μ̂ = μ_all − Δμ̂`, `Σ̂ = (L_all − ΔL̂)(L_all − ΔL̂)ᵀ + ε_jit·I`.
pub fn recover_normal(
    all: &GaussianStats,
    delta_mu: &Vector,
    delta_l: &Matrix,
) -> Result<GaussianStats> {
    let d = all.dim();
    if delta_mu.len() != d || delta_l.shape() != (d, d) {
        return Err(NsemError::ShapeMismatch(format!(
            "deviation sizes for dim {d}"
        )));
    }
    let l = all.chol.sub(delta_l)?;
    let sigma = l.matmul_t(&l)?.add_diagonal(EPS_JITTER);
    GaussianStats::new(all.mu.sub(delta_mu), sigma)
}

/// `‖μ̂ − μ‖² + ‖Σ̂ − Σ‖_F²`.
pub fn statistics_loss(pred: &GaussianStats, truth: &GaussianStats) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(NsemError::ShapeMismatch(format!(
            "dims {} vs {}",
            pred.dim(),
            truth.dim()
        )));
    }
    let ds = pred.sigma.sub(&truth.sigma)?;
    Ok(pred.mu.sub(&truth.mu).norm_sq() + ds.data().iter().map(|v| v * v).sum::<f64>())
}

/// Precomputed whitening map `z ↦ S·(z − μ)` with `S = Σ^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitener {
    pub mu: Vector,
    pub inv_sqrt: Matrix,
}

impl Whitener {
    pub fn new(stats: &GaussianStats) -> Result<Self> {
        Ok(Self {
            mu: stats.mu.clone(),
            inv_sqrt: inv_sqrt(&stats.sigma)?,
        })
    }

    /// Whitens every row of `z`.
    pub fn apply(&self, z: &Matrix) -> Result<Matrix> {
        let mut centered = z.clone();
        for r in 0..centered.rows() {
            for (v, u) in centered.row_mut(r).iter_mut().zip(self.mu.as_slice()) {
                *v -= u;
            }
        }
        // S is symmetric, so row-wise S·(z − μ) is (z − μ)·S.
        Ok(centered.matmul(&self.inv_sqrt)?)
    }
}

pub fn whiten(z: &Vector, stats: &GaussianStats) -> Result<Vector> {
    let w = Whitener::new(stats)?;
    let out = w.apply(&z.to_row_matrix())?;
    Ok(Vector::from(out.into_data()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NsemConfig {
    pub dim: usize,
    pub h_dim: usize,
    pub use_gru: bool,
    pub seed: u64,
}

impl NsemConfig {
    pub fn input_len(&self) -> usize {
        self.dim + tri_len(self.dim) + self.h_dim
    }

    pub fn output_len(&self) -> usize {
        self.dim + tri_len(self.dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct GruLayer {
    w_xz: ParamId,
    w_hz: ParamId,
    w_xr: ParamId,
    w_hr: ParamId,
    w_xh: ParamId,
    w_hh: ParamId,
}

impl GruLayer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        r: &mut rng::Rng,
    ) -> Self {
        let mut w = |tag: &str, rows: usize| {
            store.add(format!("{name}.{tag}"), glorot_uniform(rows, hidden, r))
        };
        Self {
            w_xz: w("xz", input),
            w_hz: w("hz", hidden),
            w_xr: w("xr", input),
            w_hr: w("hr", hidden),
            w_xh: w("xh", input),
            w_hh: w("hh", hidden),
        }
    }

    fn forward(
        &self,
        scope: Scope,
        tape: &mut Tape,
        x: Var,
        h: Var,
    ) -> crate::autodiff::Result<Var> {
        let lin = |tape: &mut Tape, a: Var, wa: ParamId, b: Var, wb: ParamId| {
            let wa = scope.bind(tape, wa);
            let wb = scope.bind(tape, wb);
            let p = tape.matmul(a, wa)?;
            let q = tape.matmul(b, wb)?;
            tape.add(p, q)
        };
        let z = lin(tape, x, self.w_xz, h, self.w_hz)?;
        let z = tape.sigmoid(z);
        let r = lin(tape, x, self.w_xr, h, self.w_hr)?;
        let r = tape.sigmoid(r);
        let rh = tape.hadamard(r, h)?;
        let cand = lin(tape, x, self.w_xh, rh, self.w_hh)?;
        let cand = tape.tanh(cand);
        let keep = tape.one_minus(z);
        let kept = tape.hadamard(keep, h)?;
        let new = tape.hadamard(z, cand)?;
        tape.add(kept, new)
    }
}

/// GRU hidden state, one vector per layer; the last layer feeds the MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct NsemState {
    pub h: Vec<Vector>,
}

impl NsemState {
    pub fn zeros(layers: usize, h_dim: usize) -> Self {
        Self {
            h: vec![Vector::zeros(h_dim); layers],
        }
    }

    pub fn top(&self) -> &Vector {
        self.h.last().expect("at least one layer")
    }

    pub fn is_finite(&self) -> bool {
        self.h
            .iter()
            .all(|v| v.as_slice().iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nsem {
    pub config: NsemConfig,
    pub store: ParamStore,
    mlp: Mlp2,
    gru: [GruLayer; 2],
}

/// Tape handles of predicted normal statistics.
pub(crate) struct PredVars {
    pub mu: Var,
    pub sigma: Var,
}

impl Nsem {
    pub fn new(config: NsemConfig) -> Self {
        let mut r = rng::rng(derive_seed(config.seed, "nsem-init", 0));
        let mut store = ParamStore::new();
        let (input, out) = (config.input_len(), config.output_len());
        let mlp = Mlp2::new(&mut store, "nsem.mlp", (input, out, out), true, &mut r);
        let x_len = out;
        let gru = [
            GruLayer::new(&mut store, "nsem.gru0", x_len, config.h_dim, &mut r),
            GruLayer::new(&mut store, "nsem.gru1", config.h_dim, config.h_dim, &mut r),
        ];
        Self {
            config,
            store,
            mlp,
            gru,
        }
    }

    pub fn initial_state(&self) -> NsemState {
        NsemState::zeros(2, self.config.h_dim)
    }

    fn check_state(&self, state: &NsemState) -> Result<()> {
        if state.h.len() != 2 || state.h.iter().any(|v| v.len() != self.config.h_dim) {
            return Err(NsemError::ShapeMismatch(
                "NSEM state does not match h_dim".into(),
            ));
        }
        Ok(())
    }

    fn check_dim(&self, stats: &GaussianStats) -> Result<()> {
        if stats.dim() != self.config.dim {
            return Err(NsemError::ShapeMismatch(format!(
                "statistics of dim {} for NSEM of dim {}",
                stats.dim(),
                self.config.dim
            )));
        }
        Ok(())
    }

    pub(crate) fn gru_tape(
        &self,
        scope: Scope,
        tape: &mut Tape,
        x: Var,
        h_prev: &[Var],
    ) -> Result<Vec<Var>> {
        let mut input = x;
        let mut out = Vec::with_capacity(2);
        for (layer, &h) in self.gru.iter().zip(h_prev) {
            let h = layer.forward(scope, tape, input, h)?;
            out.push(h);
            input = h;
        }
        Ok(out)
    }

    /// Raw MLP output `Δμ̂ ⊕ flatten(ΔL̂)` as a `1×out` node.
    pub(crate) fn deviation_tape(
        &self,
        scope: Scope,
        tape: &mut Tape,
        all: &GaussianStats,
        h: Var,
    ) -> Result<Var> {
        let s = tape.constant(Matrix::row_vector(&all.summary()));
        let input = tape.concat(&[s, h])?;
        Ok(self.mlp.forward(scope, tape, input)?)
    }

    pub(crate) fn recover_tape(
        &self,
        tape: &mut Tape,
        all: &GaussianStats,
        dev: Var,
    ) -> Result<PredVars> {
        let d = self.config.dim;
        let dmu = tape.slice_cols(dev, 0, d)?;
        let dl = tape.slice_cols(dev, d, tri_len(d))?;
        let dl = tape.scatter_lower(dl, d)?;
        let mu_all = tape.constant(all.mu.to_row_matrix());
        let mu = tape.sub(mu_all, dmu)?;
        let l_all = tape.constant(all.chol.clone());
        let l = tape.sub(l_all, dl)?;
        let lt = tape.transpose(l);
        let llt = tape.matmul(l, lt)?;
        let jitter = tape.constant(Matrix::identity(d).scale(EPS_JITTER));
        let sigma = tape.add(llt, jitter)?;
        Ok(PredVars { mu, sigma })
    }

    pub(crate) fn loss_tape(
        tape: &mut Tape,
        pred: &PredVars,
        truth: &GaussianStats,
    ) -> Result<Var> {
        let mu = tape.constant(truth.mu.to_row_matrix());
        let sigma = tape.constant(truth.sigma.clone());
        let dm = tape.sub(pred.mu, mu)?;
        let ds = tape.sub(pred.sigma, sigma)?;
        let a = tape.frobenius_sq(dm);
        let b = tape.frobenius_sq(ds);
        Ok(tape.add(a, b)?)
    }

    /// `(Δμ̂, ΔL̂)` from the overall statistics and the previous hidden state.
    pub fn predict_deviation(
        &self,
        all: &GaussianStats,
        state: &NsemState,
    ) -> Result<(Vector, Matrix)> {
        self.check_dim(all)?;
        self.check_state(state)?;
        let mut tape = Tape::new();
        let h = tape.constant(state.top().to_row_matrix());
        let dev = self.deviation_tape(Scope::frozen(&self.store), &mut tape, all, h)?;
        let v = tape.value(dev).data();
        let d = self.config.dim;
        Ok((Vector::from(v[..d].to_vec()), unflatten_lower(&v[d..], d)?))
    }

    /// Predicted normal statistics for a snapshot with overall statistics `all`.
    pub fn predict(&self, all: &GaussianStats, state: &NsemState) -> Result<GaussianStats> {
        let (dmu, dl) = self.predict_deviation(all, state)?;
        recover_normal(all, &dmu, &dl)
    }

    pub fn gru_step(&self, x_s: &[f64], state: &NsemState) -> Result<NsemState> {
        self.check_state(state)?;
        if x_s.len() != self.config.output_len() {
            return Err(NsemError::ShapeMismatch(format!(
                "GRU input of length {}, expected {}",
                x_s.len(),
                self.config.output_len()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(x_s));
        let h: Vec<Var> = state
            .h
            .iter()
            .map(|v| tape.constant(v.to_row_matrix()))
            .collect();
        let out = self.gru_tape(Scope::frozen(&self.store), &mut tape, x, &h)?;
        Ok(NsemState {
            h: out
                .iter()
                .map(|&v| Vector::from(tape.value(v).data().to_vec()))
                .collect(),
        })
    }

    /// Advances the state with `stats` when the GRU is enabled; identity otherwise.
    pub fn advance(&self, stats: &GaussianStats, state: &NsemState) -> Result<NsemState> {
        if self.config.use_gru {
            self.gru_step(&stats.summary(), state)
        } else {
            Ok(state.clone())
        }
    }

    /// Statistics loss of one training step; also returns the hidden-state
    /// nodes fed to the MLP.
    pub(crate) fn train_loss_tape(
        &self,
        scope: Scope,
        tape: &mut Tape,
        all: &GaussianStats,
        truth: &GaussianStats,
        history: Option<(&GaussianStats, &NsemState)>,
        state: &NsemState,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_dim(all)?;
        self.check_dim(truth)?;
        let (h_top, h_vars) = match history {
            Some((prev_truth, prev_state)) if self.config.use_gru => {
                let x = tape.constant(Matrix::row_vector(&prev_truth.summary()));
                let h: Vec<Var> = prev_state
                    .h
                    .iter()
                    .map(|v| tape.constant(v.to_row_matrix()))
                    .collect();
                let out = self.gru_tape(scope, tape, x, &h)?;
                (out[1], out)
            }
            _ => {
                let h: Vec<Var> = state
                    .h
                    .iter()
                    .map(|v| tape.constant(v.to_row_matrix()))
                    .collect();
                (h[1], h)
            }
        };
        let dev = self.deviation_tape(scope, tape, all, h_top)?;
        let pred = self.recover_tape(tape, all, dev)?;
        let loss = Self::loss_tape(tape, &pred, truth)?;
        Ok((loss, h_vars))
    }

    /// One Adam update on the statistics loss for a snapshot.
    ///
    /// `history` is the previous snapshot's ground-truth normal statistics and
    /// the state before it; when given (and the GRU is enabled) the GRU step is
    /// recorded on the tape so its weights receive gradients. Returns the loss
    /// and the state fed to the MLP.
    pub fn train_step(
        &mut self,
        adam: &mut Adam,
        all: &GaussianStats,
        truth: &GaussianStats,
        history: Option<(&GaussianStats, &NsemState)>,
        state: &NsemState,
    ) -> Result<(f64, NsemState)> {
        let mut tape = Tape::new();
        let (loss, h_vars) = self.train_loss_tape(
            Scope::train(&self.store),
            &mut tape,
            all,
            truth,
            history,
            state,
        )?;
        tape.backward(loss, &mut self.store)?;
        adam.step(&mut self.store);
        let used = NsemState {
            h: h_vars
                .iter()
                .map(|&v| Vector::from(tape.value(v).data().to_vec()))
                .collect(),
        };
        Ok((tape.value(loss).item(), used))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::rng(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
    }

    fn nsem(d: usize, h: usize) -> Nsem {
        Nsem::new(NsemConfig {
            dim: d,
            h_dim: h,
            use_gru: true,
            seed: 3,
        })
    }

    fn zero_params(n: &mut Nsem) {
        for id in n.store.ids().collect::<Vec<_>>() {
            n.store.value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn two_point_stats() {
        let e = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let s = edge_stats(&e).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.sigma, Matrix::filled(2, 2, 1.0));
        assert!(
            s.chol
                .matmul_t(&s.chol)
                .unwrap()
                .max_abs_diff(&s.sigma.add_diagonal(EPS_JITTER))
                < 1e-8
        );
    }

    #[test]
    fn identical_rows_zero_covariance() {
        let e = Matrix::from_rows(&vec![vec![0.3, -1.0, 2.0]; 5]).unwrap();
        let s = edge_stats(&e).unwrap();
        assert!(s.sigma.max_abs() < 1e-15);
        assert!(
            s.chol
                .max_abs_diff(&Matrix::identity(3).scale(EPS_JITTER.sqrt()))
                < 1e-15
        );
        assert!(matches!(
            edge_stats(&Matrix::zeros(1, 3)),
            Err(NsemError::TooFewSamples(1))
        ));
    }

    #[test]
    fn stats_match_double_loop() {
        let e = random_matrix(100, 8, 11);
        let s = edge_stats(&e).unwrap();
        let mut mu = [0.0; 8];
        for r in 0..100 {
            for c in 0..8 {
                mu[c] += e[(r, c)] / 100.0;
            }
        }
        for c in 0..8 {
            assert!((s.mu.as_slice()[c] - mu[c]).abs() < 1e-12);
        }
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for r in 0..100 {
                    acc += (e[(r, i)] - mu[i]) * (e[(r, j)] - mu[j]);
                }
                assert!((s.sigma[(i, j)] - acc / 100.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_sizes_and_zero_deviation() {
        let n = nsem(4, 8);
        assert_eq!(n.config.input_len(), 22);
        assert_eq!(n.config.output_len(), 14);
        let mut n = n;
        zero_params(&mut n);
        let all = edge_stats(&random_matrix(30, 4, 1)).unwrap();
        let (dmu, dl) = n.predict_deviation(&all, &n.initial_state()).unwrap();
        assert!(dmu.max_abs() == 0.0 && dl.max_abs() == 0.0);
    }

    #[test]
    fn recovery_identities() {
        let all = edge_stats(&random_matrix(40, 3, 2)).unwrap();
        let same = recover_normal(&all, &Vector::zeros(3), &Matrix::zeros(3, 3)).unwrap();
        assert_eq!(same.mu, all.mu);
        assert!(same.sigma.max_abs_diff(&all.sigma) < 1e-5);
        let collapsed = recover_normal(&all, &Vector::zeros(3), &all.chol).unwrap();
        assert!(
            collapsed
                .sigma
                .max_abs_diff(&Matrix::identity(3).scale(EPS_JITTER))
                < 1e-18
        );
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let mut n = nsem(2, 3);
        zero_params(&mut n);
        let state = NsemState {
            h: vec![
                Vector::from(vec![1.0, -2.0, 4.0]),
                Vector::from(vec![0.5, 0.0, -1.0]),
            ],
        };
        let next = n.gru_step(&[0.3; 5], &state).unwrap();
        assert_eq!(next.h[0].as_slice(), &[0.5, -1.0, 2.0]);
        assert_eq!(next.h[1].as_slice(), &[0.25, 0.0, -0.5]);
        assert_eq!(next, n.gru_step(&[0.3; 5], &state).unwrap());
        assert!(n.gru_step(&[0.3; 4], &state).is_err());
    }

    #[test]
    fn gru_gate_limits() {
        let mut n = nsem(2, 3);
        zero_params(&mut n);
        let state = NsemState {
            h: vec![
                Vector::from(vec![0.7, -0.2, 3.0]),
                Vector::from(vec![0.1, 0.2, 0.3]),
            ],
        };
        // Large negative update-gate bias through the input weights keeps h.
        let x = [1.0; 5];
        for layer in 0..2 {
            let id = n.store.find(&format!("nsem.gru{layer}.xz")).unwrap();
            n.store
                .value_mut(id)
                .data_mut()
                .fill(if layer == 0 { -20.0 } else { 0.0 });
        }
        let next = n.gru_step(&x, &state).unwrap();
        for (a, b) in next.h[0].as_slice().iter().zip(state.h[0].as_slice()) {
            assert!((a - b).abs() < 1e-7);
        }
        let id = n.store.find("nsem.gru0.xz").unwrap();
        n.store.value_mut(id).data_mut().fill(20.0);
        let id = n.store.find("nsem.gru0.xh").unwrap();
        n.store.value_mut(id).data_mut().fill(5.0);
        let next = n.gru_step(&x, &state).unwrap();
        assert!(next.h[0].max_abs() <= 1.0);
    }

    #[test]
    fn whitening_basics() {
        let stats = GaussianStats::new(Vector::from(vec![1.0, 2.0]), Matrix::identity(2)).unwrap();
        let z = Vector::from(vec![3.0, -1.0]);
        assert!(whiten(&stats.mu, &stats).unwrap().max_abs() < 1e-15);
        let w = whiten(&z, &stats).unwrap();
        assert!((w.as_slice()[0] - 2.0).abs() < 1e-12 && (w.as_slice()[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn self_whitening_exact() {
        let e = random_matrix(500, 4, 8)
            .matmul(&random_matrix(4, 4, 9))
            .unwrap();
        let s = edge_stats(&e).unwrap();
        let w = Whitener::new(&s).unwrap().apply(&e).unwrap();
        let back = edge_stats(&w).unwrap();
        assert!(back.mu.max_abs() <= 1e-10);
        assert!(back.sigma.max_abs_diff(&Matrix::identity(4)) <= 1e-6);
    }

    #[test]
    fn statistics_loss_arithmetic() {
        let a = GaussianStats::new(Vector::from(vec![0.0, 0.0]), Matrix::identity(2)).unwrap();
        let b = GaussianStats::new(Vector::from(vec![1.0, 1.0]), Matrix::identity(2)).unwrap();
        assert_eq!(statistics_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(statistics_loss(&b, &a).unwrap(), 2.0);
    }

    #[test]
    fn training_fits_constant_target() {
        let mut n = nsem(3, 3);
        let all = edge_stats(&random_matrix(60, 3, 4)).unwrap();
        let truth = edge_stats(&random_matrix(60, 3, 5).scale(0.5)).unwrap();
        let mut adam = Adam::new(&n.store, AdamConfig::with_lr(1e-2));
        let s0 = n.initial_state();
        let (first, _) = n
            .train_step(&mut adam, &all, &truth, Some((&truth, &s0)), &s0)
            .unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = n
                .train_step(&mut adam, &all, &truth, Some((&truth, &s0)), &s0)
                .unwrap()
                .0;
        }
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn recovered_covariance_pd_under_fuzz() {
        let all = edge_stats(&random_matrix(50, 4, 6)).unwrap();
        let mut r = rng::rng(12);
        for _ in 0..200 {
            let dmu = Vector::from(
                (0..4)
                    .map(|_| StandardNormal.sample(&mut r))
                    .collect::<Vec<f64>>(),
            );
            let raw: Vec<f64> = (0..10)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    3.0 * e
                })
                .collect::<Vec<f64>>();
            let dl = unflatten_lower(&raw, 4).unwrap();
            let rec = recover_normal(&all, &dmu, &dl).unwrap();
            let (vals, _) = crate::linalg::sym_eig(&rec.sigma).unwrap();
            assert!(vals.as_slice()[3] >= EPS_JITTER * (1.0 - 1e-6));
        }
    }
}
