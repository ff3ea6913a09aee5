//! Spectral measures of predictor matrices and their gradients.
//!
//! A predictor matrix stacks `N` linear predictors (or class prototypes) of
//! dimension `k` as rows. All quantities use the `r = min(N, k)` singular
//! values of the thin SVD.

use std::ops::Deref;

use crate::error::{invalid, Error, Result};
use crate::numerics::{softmax_unchecked, svd, Matrix, SvdResult};

/// Relative threshold under which the smallest singular value counts as zero.
pub const DEGENERACY_TOL: f64 = 1e-12;
/// Relative gap under which two singular values count as repeated.
pub const REPEAT_TOL: f64 = 1e-9;

/// `N x k` matrix of predictors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorMatrix(Matrix);

impl PredictorMatrix {
    pub fn new(w: Matrix) -> Result<Self> {
        if w.rows() == 0 || w.cols() == 0 {
            return Err(invalid("predictor matrix needs at least one row and one column"));
        }
        Ok(Self(w))
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

impl Deref for PredictorMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

impl From<PredictorMatrix> for Matrix {
    fn from(p: PredictorMatrix) -> Matrix {
        p.0
    }
}

fn nondegenerate_svd(w: &Matrix) -> Result<SvdResult> {
    let s = svd(w)?;
    let smax = s.singular_values[0];
    let smin = *s.singular_values.last().expect("r >= 1");
    if smax <= 0.0 || smin <= DEGENERACY_TOL * smax {
        let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
        return Err(Error::DegenerateMatrix { ratio });
    }
    Ok(s)
}

/// `sigma_max / sigma_min` over the `min(N, k)` singular values.
pub fn condition_number(w: &PredictorMatrix) -> Result<f64> {
    let s = nondegenerate_svd(w)?;
    Ok(s.singular_values[0] / s.singular_values[s.singular_values.len() - 1])
}

fn entropy_of(sigmas: &[f64]) -> (Vec<f64>, f64) {
    let p = softmax_unchecked(sigmas, 1.0);
    let h = p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    (p, h)
}

/// `sum_i p_i log p_i` with `p = softmax(sigma(W))`; lies in `[-log r, 0]`.
pub fn sv_entropy(w: &PredictorMatrix) -> Result<f64> {
    let s = nondegenerate_svd(w)?;
    Ok(entropy_of(&s.singular_values).1)
}

fn repeated(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= REPEAT_TOL * scale
}

/// Gradient of the condition number: `(u1 v1^T sigma_min - sigma_max u_r v_r^T) / sigma_min^2`.
pub fn grad_condition_number(w: &PredictorMatrix) -> Result<Matrix> {
    let s = nondegenerate_svd(w)?;
    let sv = &s.singular_values;
    let r = sv.len();
    if r == 1 {
        return Ok(Matrix::zeros(w.rows(), w.cols()));
    }
    let (smax, smin) = (sv[0], sv[r - 1]);
    if repeated(sv[0], sv[1], smax) || repeated(sv[r - 2], sv[r - 1], smax) {
        return Err(Error::NonSmoothPoint("repeated extreme singular value".into()));
    }
    let mut g = s.outer(0).scale(1.0 / smin);
    g.axpy(-smax / (smin * smin), &s.outer(r - 1))?;
    Ok(g)
}

/// Gradient of the singular-value entropy through `d sigma_j / dW = u_j v_j^T`.
pub fn grad_sv_entropy(w: &PredictorMatrix) -> Result<Matrix> {
    let s = nondegenerate_svd(w)?;
    let sv = &s.singular_values;
    if sv.windows(2).any(|p| repeated(p[0], p[1], sv[0])) {
        return Err(Error::NonSmoothPoint("repeated singular values".into()));
    }
    let (p, h) = entropy_of(sv);
    let mut g = Matrix::zeros(w.rows(), w.cols());
    for (j, &pj) in p.iter().enumerate() {
        // d/d sigma_j of sum p log p
        let coef = pj * (pj.ln() - h);
        g.axpy(coef, &s.outer(j))?;
    }
    Ok(g)
}

fn check_lambda(name: &str, l: f64) -> Result<()> {
    if !(l >= 0.0) || !l.is_finite() {
        return Err(invalid(format!("{name} must be a non-negative finite number, got {l}")));
    }
    Ok(())
}

/// `lambda1 * kappa(W) + lambda2 * ||W||_F^2`.
pub fn spectral_regularizer(w: &PredictorMatrix, lambda1: f64, lambda2: f64) -> Result<f64> {
    check_lambda("lambda1", lambda1)?;
    check_lambda("lambda2", lambda2)?;
    let kappa = if lambda1 > 0.0 { lambda1 * condition_number(w)? } else { 0.0 };
    Ok(kappa + lambda2 * w.frobenius_sq())
}

pub fn grad_spectral_regularizer(w: &PredictorMatrix, lambda1: f64, lambda2: f64) -> Result<Matrix> {
    check_lambda("lambda1", lambda1)?;
    check_lambda("lambda2", lambda2)?;
    let mut g = w.scale(2.0 * lambda2);
    if lambda1 > 0.0 {
        g.axpy(lambda1, &grad_condition_number(w)?)?;
    }
    Ok(g)
}

/// `lambda1 * H_sigma(W)`.
pub fn entropy_regularizer(w: &PredictorMatrix, lambda1: f64) -> Result<f64> {
    check_lambda("lambda1", lambda1)?;
    if lambda1 == 0.0 {
        return Ok(0.0);
    }
    Ok(lambda1 * sv_entropy(w)?)
}

pub fn grad_entropy_regularizer(w: &PredictorMatrix, lambda1: f64) -> Result<Matrix> {
    check_lambda("lambda1", lambda1)?;
    if lambda1 == 0.0 {
        return Ok(Matrix::zeros(w.rows(), w.cols()));
    }
    Ok(grad_sv_entropy(w)?.scale(lambda1))
}
