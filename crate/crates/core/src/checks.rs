//! Self-checks of the numerical core: whitening moments, factorizations, the
//! positive-definiteness of recovered covariances, gradients against central
//! finite differences, and the AUC against pair counting.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamStore, SparseRows, Tape, Var};
use crate::detector::{Detector, DetectorConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::eval::auc_roc;
use crate::graphstore::{init_features, Snapshot};
use crate::linalg::{cholesky, inv_sqrt, sym_eig, Matrix, Vector, EPS_JITTER};
use crate::nn::Scope;
use crate::nsem::{
    edge_stats, recover_normal, GaussianStats, Nsem, NsemConfig, NsemState, Whitener,
};
use crate::rng::{self, derive_seed, Rng};

type BoxError = Box<dyn std::error::Error + Send + Sync>;
type Result<T> = std::result::Result<T, BoxError>;

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn gaussian_matrix(r: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(r))
}

/// `A·Aᵀ/d + floor·I` for a Gaussian `A`.
pub fn random_spd(r: &mut Rng, d: usize, floor: f64) -> Matrix {
    let a = gaussian_matrix(r, d, d);
    let mut s = a
        .matmul_t(&a)
        .expect("square")
        .scale(1.0 / d as f64)
        .add_diagonal(floor);
    for i in 0..d {
        for j in 0..i {
            let v = s[(i, j)];
            s[(j, i)] = v;
        }
    }
    s
}

/// Worst deviations of whitened samples from zero mean and identity covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentErrors {
    /// `‖mean‖_∞`.
    pub mean: f64,
    /// `‖cov − I‖_max`.
    pub cov: f64,
}

/// Draws `samples` points from `N(μ, Σ)` with a random SPD `Σ` of size `d`,
/// whitens them with either the sample statistics or the true ones, and
/// measures the empirical moments. `corrupt` scales the inverse square root
/// by 1.1 before use.
pub fn whitening_moments(
    samples: usize,
    d: usize,
    seed: u64,
    sample_stats: bool,
    corrupt: bool,
) -> Result<MomentErrors> {
    let mut r = rng::rng(derive_seed(seed, "check-whiten", 0));
    let sigma = random_spd(&mut r, d, 0.5);
    let mu = Vector::from((0..d).map(|_| 2.0 * normal(&mut r)).collect::<Vec<_>>());
    let l = cholesky(&sigma)?;
    let eps = gaussian_matrix(&mut r, samples, d);
    let mut x = eps.matmul_t(&l)?;
    for i in 0..samples {
        for (v, m) in x.row_mut(i).iter_mut().zip(mu.as_slice()) {
            *v += m;
        }
    }
    let stats = if sample_stats {
        edge_stats(&x)?
    } else {
        GaussianStats::new(mu, sigma)?
    };
    let mut w = Whitener::new(&stats)?;
    if corrupt {
        w.inv_sqrt = w.inv_sqrt.scale(1.1);
    }
    let z = w.apply(&x)?;
    // Moments accumulated directly rather than through `edge_stats`.
    let n = samples as f64;
    let mut mean = vec![0.0; d];
    for i in 0..samples {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v / n;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for i in 0..samples {
        let row = z.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (row[a] - mean[a]) * (row[b] - mean[b]) / n;
            }
        }
    }
    Ok(MomentErrors {
        mean: mean.iter().fold(0.0, |m, v| m.max(v.abs())),
        cov: cov.max_abs_diff(&Matrix::identity(d)),
    })
}

/// Largest Frobenius errors of `L·Lᵀ − Σ` and `W·Σ·W − I` (`W = Σ^{-1/2}`)
/// over `count` random SPD matrices with sizes spread over `1..=max_dim`.
pub fn factorization_errors(count: usize, max_dim: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = rng::rng(derive_seed(seed, "check-factor", 0));
    let (mut chol_err, mut sqrt_err) = (0.0f64, 0.0f64);
    for k in 0..count {
        let d = if k + 1 == count {
            max_dim
        } else {
            r.random_range(1..=max_dim)
        };
        let sigma = random_spd(&mut r, d, 0.1);
        let l = cholesky(&sigma)?;
        chol_err = chol_err.max(l.matmul_t(&l)?.sub(&sigma)?.frobenius_norm());
        let w = inv_sqrt(&sigma)?;
        let conj = w.matmul(&sigma)?.matmul(&w)?;
        sqrt_err = sqrt_err.max(conj.sub(&Matrix::identity(d))?.frobenius_norm());
    }
    Ok((chol_err, sqrt_err))
}

/// Smallest eigenvalue of the recovered covariance over `trials` random
/// overall statistics and deviations, including deviations that cancel the
/// factor exactly.
pub fn pd_fuzz(trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng::rng(derive_seed(seed, "check-pd", 0));
    let mut min_eig = f64::INFINITY;
    for k in 0..trials {
        let d = r.random_range(1..=8);
        let all = GaussianStats::new(
            Vector::from((0..d).map(|_| normal(&mut r)).collect::<Vec<_>>()),
            random_spd(&mut r, d, 1e-3),
        )?;
        let scale = [1e-3, 1.0, 10.0, 1e3][k % 4];
        let delta_mu = Vector::from((0..d).map(|_| scale * normal(&mut r)).collect::<Vec<_>>());
        let delta_l = match k % 5 {
            0 => all.chol.clone(),
            _ => Matrix::from_fn(
                d,
                d,
                |i, j| if j <= i { scale * normal(&mut r) } else { 0.0 },
            ),
        };
        let rec = recover_normal(&all, &delta_mu, &delta_l)?;
        let (ev, _) = sym_eig(&rec.sigma)?;
        min_eig = ev.as_slice().iter().fold(min_eig, |m, &v| m.min(v));
    }
    Ok(min_eig)
}

/// Worst relative error between reverse-mode and central-difference gradients
/// for one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

const FD_STEP: f64 = 1e-5;

/// Below this magnitude gradients are compared absolutely; the difference
/// quotient cannot resolve them relative to a loss of order one.
const REL_FLOOR: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `∂/∂inputs` of `sum(out ∘ P)` for a random projection `P`.
fn check_primitive(
    name: &str,
    inputs: Vec<Matrix>,
    r: &mut Rng,
    build: impl Fn(&mut Tape, &[Var]) -> crate::autodiff::Result<Var>,
) -> Result<GradCase> {
    let forward = |inputs: &[Matrix], proj: &Matrix| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let p = tape.constant(proj.clone());
        let prod = tape.hadamard(out, p)?;
        let loss = tape.sum_all(prod);
        Ok((tape, vars, loss))
    };
    let mut probe = Tape::new();
    let pv: Vec<Var> = inputs.iter().map(|m| probe.constant(m.clone())).collect();
    let out = build(&mut probe, &pv)?;
    let (rows, cols) = probe.shape(out);
    let proj = gaussian_matrix(r, rows, cols);

    let (tape, vars, loss) = forward(&inputs, &proj)?;
    let adj = tape.adjoints(loss)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = adj
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        for e in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[e] -= FD_STEP;
            let (tp, _, lp) = forward(&plus, &proj)?;
            let (tm, _, lm) = forward(&minus, &proj)?;
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
            checked += 1;
        }
    }
    Ok(GradCase {
        name: name.to_string(),
        max_rel_err: worst,
        checked,
    })
}

/// Compares parameter gradients of a model loss with central differences on
/// up to `per_param` entries of every parameter.
fn check_params(
    name: &str,
    store: &ParamStore,
    per_param: usize,
    r: &mut Rng,
    loss: impl Fn(&ParamStore, &mut Tape) -> Result<Var>,
) -> Result<GradCase> {
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let l = loss(&work, &mut tape)?;
    tape.backward(l, &mut work)?;
    let grads: Vec<Matrix> = work.ids().map(|id| work.grad(id).clone()).collect();
    let value_at = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(s, &mut t)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, id) in store.ids().enumerate() {
        let len = store.value(id).len();
        let picks: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| r.random_range(0..len)).collect()
        };
        for e in picks {
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[e] += FD_STEP;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[e] -= FD_STEP;
            let numeric = (value_at(&plus)? - value_at(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[k].data()[e], numeric));
            checked += 1;
        }
    }
    Ok(GradCase {
        name: name.to_string(),
        max_rel_err: worst,
        checked,
    })
}

/// Matrix with entries bounded away from zero (kinks of ReLU and the
/// normalizer floor are avoided).
fn away_from_zero(r: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = r.random_range(0.2..1.5);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn primitive_cases(r: &mut Rng) -> Result<Vec<GradCase>> {
    let shape = |r: &mut Rng| (r.random_range(1..=4), r.random_range(1..=4));
    let mut out = Vec::new();
    let (m, k) = shape(r);
    let n = r.random_range(1..=4);
    let (a, b) = (gaussian_matrix(r, m, k), gaussian_matrix(r, k, n));
    out.push(check_primitive("matmul", vec![a, b], r, |t, v| {
        t.matmul(v[0], v[1])
    })?);
    let (m, n) = shape(r);
    let pair = vec![gaussian_matrix(r, m, n), gaussian_matrix(r, m, n)];
    out.push(check_primitive("add", pair.clone(), r, |t, v| {
        t.add(v[0], v[1])
    })?);
    out.push(check_primitive("sub", pair.clone(), r, |t, v| {
        t.sub(v[0], v[1])
    })?);
    out.push(check_primitive("hadamard", pair, r, |t, v| {
        t.hadamard(v[0], v[1])
    })?);
    let one = vec![gaussian_matrix(r, m, n)];
    out.push(check_primitive("scalar_mul", one.clone(), r, |t, v| {
        Ok(t.scalar_mul(v[0], -1.7))
    })?);
    out.push(check_primitive("add_scalar", one.clone(), r, |t, v| {
        Ok(t.add_scalar(v[0], 0.3))
    })?);
    out.push(check_primitive("one_minus", one.clone(), r, |t, v| {
        Ok(t.one_minus(v[0]))
    })?);
    out.push(check_primitive("transpose", one.clone(), r, |t, v| {
        Ok(t.transpose(v[0]))
    })?);
    out.push(check_primitive("sigmoid", one.clone(), r, |t, v| {
        Ok(t.sigmoid(v[0]))
    })?);
    out.push(check_primitive("tanh", one.clone(), r, |t, v| {
        Ok(t.tanh(v[0]))
    })?);
    out.push(check_primitive("mean_rows", one.clone(), r, |t, v| {
        Ok(t.mean_rows(v[0]))
    })?);
    out.push(check_primitive("sum_all", one.clone(), r, |t, v| {
        Ok(t.sum_all(v[0]))
    })?);
    out.push(check_primitive("frobenius_sq", one, r, |t, v| {
        Ok(t.frobenius_sq(v[0]))
    })?);
    let kinked = vec![away_from_zero(r, m, n)];
    out.push(check_primitive("relu", kinked, r, |t, v| Ok(t.relu(v[0])))?);
    let num = gaussian_matrix(r, m, n);
    let den = Matrix::from_fn(m, n, |_, _| r.random_range(0.3..2.0));
    out.push(check_primitive(
        "elementwise_div",
        vec![num, den],
        r,
        |t, v| t.elementwise_div(v[0], v[1], 1e-8),
    )?);
    let row = gaussian_matrix(r, 1, n);
    out.push(check_primitive(
        "add_row",
        vec![gaussian_matrix(r, m, n), row],
        r,
        |t, v| t.add_row(v[0], v[1]),
    )?);
    let n2 = r.random_range(1..=3);
    out.push(check_primitive(
        "concat",
        vec![gaussian_matrix(r, m, n), gaussian_matrix(r, m, n2)],
        r,
        |t, v| t.concat(&[v[0], v[1]]),
    )?);
    let wide = gaussian_matrix(r, m, 5);
    out.push(check_primitive("slice_cols", vec![wide], r, |t, v| {
        t.slice_cols(v[0], 1, 3)
    })?);
    let nodes = 5;
    let nbrs: Vec<Vec<usize>> = (0..nodes)
        .map(|i| {
            (0..nodes)
                .filter(|&j| j != i && r.random_bool(0.5))
                .collect()
        })
        .collect();
    let op = Arc::new(SparseRows::mean_of(nodes, &nbrs));
    out.push(check_primitive(
        "aggregate",
        vec![gaussian_matrix(r, nodes, 3)],
        r,
        move |t, v| t.aggregate(v[0], Arc::clone(&op)),
    )?);
    let idx: Arc<[usize]> = Arc::from(vec![0usize, 3, 3, 1, 4]);
    out.push(check_primitive(
        "gather_rows",
        vec![gaussian_matrix(r, nodes, 2)],
        r,
        move |t, v| t.gather_rows(v[0], Arc::clone(&idx)),
    )?);
    let d = 3;
    out.push(check_primitive(
        "scatter_lower",
        vec![gaussian_matrix(r, 1, d * (d + 1) / 2)],
        r,
        move |t, v| t.scatter_lower(v[0], d),
    )?);
    let len = r.random_range(2..=6);
    let scores = Matrix::from_fn(len, 1, |_, _| r.random_range(0.05..0.95));
    let labels: Vec<f64> = (0..len).map(|i| (i % 2) as f64).collect();
    for mean in [false, true] {
        let labels = labels.clone();
        let name = if mean { "bce_mean" } else { "bce_sum" };
        out.push(check_primitive(
            name,
            vec![scores.clone()],
            r,
            move |t, v| t.bce(v[0], &labels, mean),
        )?);
    }
    Ok(out)
}

fn small_snapshot(r: &mut Rng, nodes: usize, dim: usize, seed: u64) -> Snapshot {
    let mut edges = Vec::new();
    for i in 0..nodes {
        for j in (i + 1)..nodes {
            if r.random_bool(0.35) {
                edges.push((i, j));
            }
        }
    }
    Snapshot::new(
        0,
        nodes,
        edges,
        Arc::new(init_features(nodes, dim, seed).scale(2.0)),
    )
}

/// Gives zero-initialized biases random values so that no ReLU sits exactly
/// at its kink.
fn randomize_biases(store: &mut ParamStore, r: &mut Rng) {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.get(id).name.ends_with(".b"))
        .collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = 0.3 * normal(r);
        }
    }
}

fn loss_cases(r: &mut Rng, seed: u64, per_param: usize) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();

    let snap = small_snapshot(r, 7, 3, derive_seed(seed, "check-grad-features", 0));
    let mut encoder = Encoder::new(EncoderConfig {
        input_dim: 3,
        dim: 3,
        neighbor_k: 4,
        simple: false,
        seed,
    });
    randomize_biases(&mut encoder.store, r);
    let cur = encoder.operator(&snap);
    let state = {
        let s0 = encoder.initial_state(7);
        encoder.step(&snap.features, &cur, &cur, &s0)?.1
    };
    out.push(check_params(
        "recon_loss",
        &encoder.store,
        per_param,
        r,
        |store, tape| {
            let mut e = encoder.clone();
            e.store = store.clone();
            Ok(
                e.train_loss_tape(Scope::train(store), tape, &snap, &cur, &cur, &state)?
                    .0,
            )
        },
    )?);

    let d = 3;
    let mut nsem = Nsem::new(NsemConfig {
        dim: d,
        h_dim: 5,
        use_gru: true,
        seed,
    });
    randomize_biases(&mut nsem.store, r);
    let stats =
        |r: &mut Rng| -> Result<GaussianStats> { Ok(edge_stats(&gaussian_matrix(r, 40, d))?) };
    let (all, truth, prev_truth) = (stats(r)?, stats(r)?, stats(r)?);
    let prev_state = NsemState {
        h: (0..2)
            .map(|_| Vector::from((0..5).map(|_| 0.5 * normal(r)).collect::<Vec<_>>()))
            .collect(),
    };
    let zero = nsem.initial_state();
    out.push(check_params(
        "statistics_loss",
        &nsem.store,
        per_param,
        r,
        |store, tape| {
            let mut n = nsem.clone();
            n.store = store.clone();
            Ok(n.train_loss_tape(
                Scope::train(store),
                tape,
                &all,
                &truth,
                Some((&prev_truth, &prev_state)),
                &zero,
            )?
            .0)
        },
    )?);

    let mut det = Detector::new(DetectorConfig {
        dim: d,
        mean_loss: false,
        seed,
    });
    randomize_biases(&mut det.store, r);
    let z = gaussian_matrix(r, 12, d);
    let labels: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
    out.push(check_params(
        "bce_loss",
        &det.store,
        per_param,
        r,
        |store, tape| {
            let mut dt = det.clone();
            dt.store = store.clone();
            Ok(dt.loss_tape(Scope::train(store), tape, &z, &labels)?)
        },
    )?);
    Ok(out)
}

/// Every tape primitive plus the reconstruction, statistics and cross-entropy
/// graphs. `per_param` bounds the entries checked per model parameter.
pub fn gradient_suite(seed: u64, per_param: usize) -> Result<Vec<GradCase>> {
    let mut r = rng::rng(derive_seed(seed, "check-grad", 0));
    let mut cases = primitive_cases(&mut r)?;
    cases.extend(loss_cases(&mut r, seed, per_param)?);
    Ok(cases)
}

/// Pair-counting AUC with ties worth one half.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u128;
    let (mut pos, mut neg) = (0u128, 0u128);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                twice += match si.partial_cmp(&sj) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

/// Number of random tied score sets on which the rank AUC differs from pair
/// counting.
pub fn auc_oracle(trials: usize, seed: u64) -> Result<usize> {
    let mut r = rng::rng(derive_seed(seed, "check-auc", 0));
    let mut mismatches = 0;
    for _ in 0..trials {
        let n = r.random_range(2..=120);
        let levels = r.random_range(1..=12);
        let scores: Vec<f64> = (0..n)
            .map(|_| r.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        if auc_roc(&scores, &labels)? != brute_force_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Perturbs the whitening transform so the moment checks must fail.
    pub corrupt_inv_sqrt: bool,
}

fn outcome(name: &str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult {
            name: name.to_string(),
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub const GRAD_TOL: f64 = 1e-4;

/// The fast suite behind the `check` command.
pub fn run_checks(opts: CheckOptions) -> Vec<CheckResult> {
    let seed = opts.seed;
    let corrupt = opts.corrupt_inv_sqrt;
    vec![
        outcome(
            "whitening moments (sample statistics)",
            whitening_moments(10_000, 8, seed, true, corrupt).map(|e| {
                (
                    e.mean <= 1e-10 && e.cov <= 1e-6,
                    format!("mean {:.2e}, cov {:.2e}", e.mean, e.cov),
                )
            }),
        ),
        outcome(
            "whitening moments (true statistics)",
            whitening_moments(10_000, 8, seed, false, corrupt).map(|e| {
                (
                    e.mean <= 0.05 && e.cov <= 0.08,
                    format!("mean {:.3}, cov {:.3}", e.mean, e.cov),
                )
            }),
        ),
        outcome(
            "cholesky and inverse square root",
            factorization_errors(30, 48, seed).map(|(c, s)| {
                (
                    c <= 1e-10 && s <= 1e-8,
                    format!("reconstruction {c:.2e}, conjugation {s:.2e}"),
                )
            }),
        ),
        outcome(
            "recovered covariance is positive definite",
            pd_fuzz(200, seed).map(|m| (m >= EPS_JITTER, format!("min eigenvalue {m:.3e}"))),
        ),
        outcome(
            "gradients match finite differences",
            gradient_suite(seed, 6).map(|cases| {
                let worst = cases
                    .iter()
                    .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                    .expect("nonempty");
                (
                    worst.max_rel_err <= GRAD_TOL,
                    format!(
                        "{} graphs, worst {} at {:.2e}",
                        cases.len(),
                        worst.name,
                        worst.max_rel_err
                    ),
                )
            }),
        ),
        outcome(
            "AUC equals pair counting",
            auc_oracle(200, seed).map(|m| (m == 0, format!("{m} mismatches in 200 sets"))),
        ),
    ]
}
