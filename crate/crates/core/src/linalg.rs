//! Dense row-major matrices and the symmetric positive-definite factorizations
//! used by the whitening machinery.
//!
//! Everything here is plain `f64` arithmetic on owned buffers; all functions are
//! pure and can be called from any thread.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Pivot threshold below which a matrix is reported as not positive definite.
pub const EPS_PD: f64 = 1e-12;
/// Floor applied to eigenvalues before forming `Λ^{-1/2}`.
pub const EPS_EIG: f64 = 1e-10;
/// Diagonal jitter callers add when they need a guaranteed PD matrix.
pub const EPS_JITTER: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("symmetric eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("non-finite entry in matrix data")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from a row-major buffer, rejecting bad lengths and non-finite data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(LinalgError::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), ncols, rows.concat())
    }

    /// Row vector (1×n).
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Only meaningful for 1×1 matrices; panics otherwise.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on a {}x{} matrix",
            self.rows,
            self.cols
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(LinalgError::ShapeMismatch(format!(
                "matmul {}x{} · {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(LinalgError::ShapeMismatch(format!(
                "t_matmul {}x{}ᵀ · {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "matmul_t {}x{} · {}x{}ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, rhs: &Matrix, what: &str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::ShapeMismatch(format!(
                "{what} {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "add")?;
        Ok(self.zip_map(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "sub")?;
        Ok(self.zip_map(rhs, |a, b| a - b))
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "hadamard")?;
        Ok(self.zip_map(rhs, |a, b| a * b))
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip_map(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_diagonal(&self, value: f64) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += value;
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entry of `self − rhs`.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|i| ((i + 1)..self.cols).all(|j| self[(i, j)] == 0.0))
    }

    /// Mean of the rows as a vector of length `cols`.
    pub fn column_means(&self) -> Vector {
        let mut mean = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Vector::from(mean)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a · b`; shapes are assumed checked.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// Dense real vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_row_matrix(&self) -> Matrix {
        Matrix::row_vector(&self.0)
    }

    /// `m · self` treating `self` as a column vector.
    pub fn left_mul(&self, m: &Matrix) -> Result<Vector> {
        if m.cols() != self.len() {
            return Err(LinalgError::ShapeMismatch(format!(
                "{}x{} · vector of length {}",
                m.rows(),
                m.cols(),
                self.len()
            )));
        }
        Ok(Vector(
            (0..m.rows()).map(|r| dot(m.row(r), &self.0)).collect(),
        ))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Cholesky factor together with the eigendecomposition of an SPD matrix.
#[derive(Clone, Debug)]
pub struct SpdFactorization {
    pub chol_lower: Matrix,
    pub eigvals: Vector,
    pub eigvecs: Matrix,
}

impl SpdFactorization {
    pub fn new(sigma: &Matrix) -> Result<Self> {
        let chol_lower = cholesky(sigma)?;
        let (eigvals, eigvecs) = sym_eig(sigma)?;
        let eigvals = Vector(eigvals.0.iter().map(|&l| l.max(EPS_EIG)).collect());
        Ok(Self {
            chol_lower,
            eigvals,
            eigvecs,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol_lower.rows()
    }

    /// `V Λ^{-1/2} Vᵀ`.
    pub fn inv_sqrt(&self) -> Matrix {
        spectral_map(&self.eigvals, &self.eigvecs, |l| 1.0 / l.sqrt())
    }
}

fn check_symmetric(sigma: &Matrix) -> Result<()> {
    if !sigma.is_square() {
        return Err(LinalgError::ShapeMismatch(format!(
            "expected a square matrix, got {}x{}",
            sigma.rows(),
            sigma.cols()
        )));
    }
    let asym = sigma.max_asymmetry();
    if asym > SYMMETRY_TOL * sigma.max_abs().max(1.0) {
        return Err(LinalgError::NotSymmetric(asym));
    }
    Ok(())
}

/// Lower-triangular `L` with `L·Lᵀ = sigma`.
pub fn cholesky(sigma: &Matrix) -> Result<Matrix> {
    check_symmetric(sigma)?;
    let n = sigma.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = sigma[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > EPS_PD) {
            return Err(LinalgError::NotPositiveDefinite {
                index: j,
                pivot: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = sigma[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues are returned in descending order; column `k` of the returned
/// matrix is the unit eigenvector for eigenvalue `k`.
pub fn sym_eig(sigma: &Matrix) -> Result<(Vector, Matrix)> {
    check_symmetric(sigma)?;
    let n = sigma.rows();
    let mut a = sigma.clone();
    // Symmetrize exactly so the rotations act on a truly symmetric matrix.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    if n <= 1 || scale == 0.0 {
        return Ok(sorted_eigen(&a, v));
    }
    let tol = (f64::EPSILON * scale).powi(2);

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
    }
    Ok(sorted_eigen(&a, v))
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

fn sorted_eigen(a: &Matrix, v: Matrix) -> (Vector, Matrix) {
    let n = a.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let vals = Vector(order.iter().map(|&i| a[(i, i)]).collect());
    let vecs = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

fn spectral_map(vals: &Vector, vecs: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = vals.len();
    let scaled: Vec<f64> = vals.as_slice().iter().map(|&l| f(l)).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vecs[(i, k)] * scaled[k] * vecs[(j, k)];
            }
            out[(i, j)] = acc;
            out[(j, i)] = acc;
        }
    }
    out
}

/// Symmetric inverse square root `Σ^{-1/2}` with eigenvalues floored at [`EPS_EIG`].
pub fn inv_sqrt(sigma: &Matrix) -> Result<Matrix> {
    let (vals, vecs) = sym_eig(sigma)?;
    let n = vals.len();
    if n > 0 {
        let min = vals[n - 1];
        if !(min > EPS_PD) {
            return Err(LinalgError::NotPositiveDefinite {
                index: n - 1,
                pivot: min,
            });
        }
    }
    Ok(spectral_map(&vals, &vecs, |l| 1.0 / l.max(EPS_EIG).sqrt()))
}

/// Lower triangle in row-major order: (0,0), (1,0), (1,1), (2,0), ...
pub fn flatten_lower(l: &Matrix) -> Vector {
    let n = l.rows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        out.extend_from_slice(&l.row(i)[..=i]);
    }
    Vector(out)
}

pub fn unflatten_lower(v: &[f64], dim: usize) -> Result<Matrix> {
    if v.len() != tri_len(dim) {
        return Err(LinalgError::ShapeMismatch(format!(
            "{} values cannot fill a {dim}x{dim} lower triangle",
            v.len()
        )));
    }
    let mut l = Matrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in 0..=i {
            l[(i, j)] = v[k];
            k += 1;
        }
    }
    Ok(l)
}

/// Number of entries in the lower triangle of a `d×d` matrix.
#[inline]
pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        a.matmul_t(&a).unwrap().add_diagonal(0.5)
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Matrix::identity(2)).unwrap();
        assert_eq!(l, Matrix::identity(2));
    }

    #[test]
    fn cholesky_hand_example() {
        let s = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&s).unwrap();
        let expected = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap();
        assert!(l.max_abs_diff(&expected) < 1e-15);
        assert!(l.matmul_t(&l).unwrap().max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let s = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky(&s),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let s = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky(&s), Err(LinalgError::NotSymmetric(_))));
    }

    #[test]
    fn inv_sqrt_diagonal() {
        let s = inv_sqrt(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert!(s.max_abs_diff(&Matrix::diag(&[0.5, 1.0 / 3.0])) < 1e-14);
        assert!(
            inv_sqrt(&Matrix::identity(3))
                .unwrap()
                .max_abs_diff(&Matrix::identity(3))
                < 1e-15
        );
    }

    #[test]
    fn inv_sqrt_conjugates_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 5, 17, 40] {
            let sigma = random_spd(n, &mut rng);
            let s = inv_sqrt(&sigma).unwrap();
            assert!(s.max_asymmetry() < 1e-12);
            let w = s.matmul(&sigma).unwrap().matmul_t(&s).unwrap();
            assert!(w.sub(&Matrix::identity(n)).unwrap().frobenius_norm() <= 1e-8);
        }
    }

    #[test]
    fn inv_sqrt_rejects_singular() {
        let s = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(inv_sqrt(&s).is_err());
    }

    #[test]
    fn sym_eig_cases() {
        let (vals, vecs) = sym_eig(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(vals.as_slice(), &[3.0, 1.0]);
        assert_eq!(vecs, Matrix::identity(2));

        let (vals, _) =
            sym_eig(&Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap()).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);

        let (vals, _) = sym_eig(&Matrix::identity(6)).unwrap();
        assert!(vals.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn sym_eig_residual_and_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(12, 12, |_, _| rng.random_range(-2.0..2.0));
        let sym = a.add(&a.transpose()).unwrap();
        let (vals, vecs) = sym_eig(&sym).unwrap();
        for k in 0..12 {
            let col = Vector::from((0..12).map(|r| vecs[(r, k)]).collect::<Vec<_>>());
            let av = col.left_mul(&sym).unwrap();
            for r in 0..12 {
                assert!((av[r] - vals[k] * col[r]).abs() < 1e-8);
            }
        }
        let vtv = vecs.t_matmul(&vecs).unwrap();
        assert!(vtv.max_abs_diff(&Matrix::identity(12)) < 1e-10);
        let sum: f64 = vals.as_slice().iter().sum();
        assert!((sum - sym.trace()).abs() < 1e-8);
        assert!(vals.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn flatten_lower_definitional() {
        let l = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(flatten_lower(&l).as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(flatten_lower(&Matrix::scalar(5.0)).as_slice(), &[5.0]);
        assert!(unflatten_lower(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn spd_factorization_bundle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = random_spd(6, &mut rng);
        let f = SpdFactorization::new(&sigma).unwrap();
        assert_eq!(f.dim(), 6);
        assert!(f.eigvals.as_slice().iter().all(|&v| v >= EPS_EIG));
        assert!(f.inv_sqrt().max_abs_diff(&inv_sqrt(&sigma).unwrap()) < 1e-12);
    }

    #[test]
    fn from_vec_validates() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert_eq!(
            Matrix::from_vec(1, 1, vec![f64::NAN]),
            Err(LinalgError::NonFinite)
        );
    }

    proptest::proptest! {
        #[test]
        fn flatten_round_trip(d in 1usize..8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = Matrix::from_fn(d, d, |i, j| if j <= i { rng.random_range(-3.0..3.0) } else { 0.0 });
            let v = flatten_lower(&l);
            proptest::prop_assert_eq!(v.len(), tri_len(d));
            proptest::prop_assert_eq!(unflatten_lower(v.as_slice(), d).unwrap(), l);
        }

        #[test]
        fn cholesky_reconstructs(d in 1usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma = random_spd(d, &mut rng);
            let l = cholesky(&sigma).unwrap();
            proptest::prop_assert!(l.is_lower_triangular());
            proptest::prop_assert!((0..d).all(|i| l[(i, i)] > 0.0));
            proptest::prop_assert!(l.matmul_t(&l).unwrap().max_abs_diff(&sigma) <= 1e-10);
        }
    }
}
