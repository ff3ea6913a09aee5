//! Dense linear-algebra substrate.
//!
//! Everything here is `f64`, row-major, and allocation-per-call. Sizes in this
//! crate stay at desk scale (a few hundred rows at most), so the algorithms
//! favour accuracy and determinism over asymptotic speed.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{invalid, shape, Error, Result};

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Checked constructor: length must be `rows * cols` and all entries finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Rectangular diagonal matrix with `diag` on the main diagonal.
    pub fn diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape("ragged rows"));
        }
        Self::new(r, c, rows.iter().flatten().copied().collect())
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(shape(format!("{}x{} times vector of length {}", self.rows, self.cols, v.len())));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Frobenius inner product `sum_ij a_ij b_ij`.
    pub fn inner(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Three-way tensor; element `(i, j, l)` lives at `(i * d2 + j) * d3 + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(shape(format!("{} values for tensor of dims {dims:?}", data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("tensor entries must be finite"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self { dims, data: vec![0.0; dims.0 * dims.1 * dims.2] }
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                for l in 0..dims.2 {
                    t[(i, j, l)] = f(i, j, l);
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn dim(&self, mode: usize) -> usize {
        match mode {
            1 => self.dims.0,
            2 => self.dims.1,
            3 => self.dims.2,
            _ => panic!("mode must be 1, 2 or 3"),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j, l): (usize, usize, usize)) -> &f64 {
        &self.data[(i * self.dims.1 + j) * self.dims.2 + l]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor3 {
    #[inline]
    fn index_mut(&mut self, (i, j, l): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(i * self.dims.1 + j) * self.dims.2 + l]
    }
}

/// Thin singular value decomposition `m = u * diag(s) * v^T`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `rows x r`, orthonormal columns.
    pub u: Matrix,
    /// Length `r = min(rows, cols)`, non-negative, descending.
    pub singular_values: Vec<f64>,
    /// `cols x r`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let r = self.singular_values.len();
        let us = Matrix::from_fn(self.u.rows(), r, |i, j| self.u[(i, j)] * self.singular_values[j]);
        us.matmul(&self.v.transpose()).expect("svd factors are conformable")
    }

    /// Rank-one outer product `u_j v_j^T`, i.e. the gradient of `sigma_j` w.r.t. the input.
    pub fn outer(&self, j: usize) -> Matrix {
        Matrix::from_fn(self.u.rows(), self.v.rows(), |a, b| self.u[(a, j)] * self.v[(b, j)])
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Wide inputs are handled by decomposing the transpose. Ties between equal
/// singular values keep the original column order.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(invalid("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(invalid("svd input has non-finite entries"));
    }
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose())?;
        return Ok(SvdResult { u: t.v, singular_values: t.singular_values, v: t.u });
    }
    svd_tall(m)
}

fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Work column-major: cols[j] is column j of the rotated matrix.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // a threshold of plain machine epsilon can cycle on rounding noise
    let tol = m as f64 * f64::EPSILON;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                rotate(&mut left[p], &mut right[0], c, s);
                let (vl, vr) = vcols.split_at_mut(q);
                rotate(&mut vl[p], &mut vr[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NumericalError("Jacobi SVD did not converge".into()));
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal values keep column order
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let smax = norms[order[0]];
    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        for r in 0..n {
            v[(r, k)] = vcols[j][r];
        }
        if sigma > smax * f64::EPSILON * (m as f64) && sigma > f64::MIN_POSITIVE {
            for r in 0..m {
                u[(r, k)] = cols[j][r] / sigma;
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok(SvdResult { u, singular_values: s, v })
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let xa = *a;
        let yb = *b;
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to all other columns.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let (m, n) = u.shape();
    let mut basis = 0usize;
    for &k in missing {
        loop {
            assert!(basis < m, "cannot complete orthonormal basis");
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            // two passes of Gram-Schmidt for stability
            for _ in 0..2 {
                for j in 0..n {
                    if j == k || (missing.contains(&j) && u.col(j).iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let col = u.col(j);
                    let proj = dot(&cand, &col);
                    for (c, x) in cand.iter_mut().zip(&col) {
                        *c -= proj * x;
                    }
                }
            }
            let nn = norm(&cand);
            if nn > 1e-8 {
                for r in 0..m {
                    u[(r, k)] = cand[r] / nn;
                }
                break;
            }
        }
    }
}

/// Temperature softmax with max subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("softmax temperature must be positive, got {temperature}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid("softmax input must be finite"));
    }
    Ok(softmax_unchecked(v, temperature))
}

pub(crate) fn softmax_unchecked(v: &[f64], temperature: f64) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = v.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(v / temperature)`, computed as `x - logsumexp(x)`.
pub(crate) fn log_softmax(v: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = v.iter().map(|x| x / temperature).collect();
    let lse = logsumexp(&scaled);
    scaled.into_iter().map(|x| x - lse).collect()
}

pub(crate) fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mode-`n` product `t x_n m` (modes are 1-based).
pub fn n_mode_product(t: &Tensor3, m: &Matrix, mode: usize) -> Result<Tensor3> {
    if !(1..=3).contains(&mode) {
        return Err(invalid(format!("mode must be 1, 2 or 3, got {mode}")));
    }
    let (d1, d2, d3) = t.dims();
    if m.cols() != t.dim(mode) {
        return Err(shape(format!(
            "matrix with {} columns cannot act on mode {mode} of dims {:?}",
            m.cols(),
            t.dims()
        )));
    }
    let out_dims = match mode {
        1 => (m.rows(), d2, d3),
        2 => (d1, m.rows(), d3),
        _ => (d1, d2, m.rows()),
    };
    let mut out = Tensor3::zeros(out_dims);
    let (o1, o2, o3) = out_dims;
    for i in 0..o1 {
        for j in 0..o2 {
            for l in 0..o3 {
                let acc = match mode {
                    1 => (0..d1).map(|s| m[(i, s)] * t[(s, j, l)]).sum(),
                    2 => (0..d2).map(|s| m[(j, s)] * t[(i, s, l)]).sum(),
                    _ => (0..d3).map(|s| m[(l, s)] * t[(i, j, s)]).sum(),
                };
                out[(i, j, l)] = acc;
            }
        }
    }
    Ok(out)
}

/// Kronecker product `a (x) b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("kron of an empty matrix"));
    }
    let (br, bc) = b.shape();
    Ok(Matrix::from_fn(a.rows() * br, a.cols() * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)]))
}

/// Vectorization with mode 1 slowest and mode 3 fastest.
///
/// With this ordering `vec(G x3 Mf x2 Mi x1 Mo) = (Mo (x) I (x) I)(I (x) Mi (x) I)(I (x) I (x) Mf) vec(G)`.
pub fn vec(t: &Tensor3) -> Vec<f64> {
    t.as_slice().to_vec()
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NumericalError(format!("non-finite function value around coordinate {i}")));
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}
