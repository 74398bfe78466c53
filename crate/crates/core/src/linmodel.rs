//! Weighted linear and logistic regression kernels.
//!
//! Everything here is a pure function of its inputs. Linear solves go through
//! a Householder QR of the row-scaled design `diag(sqrt(w)) X`; the singular
//! values of the triangular factor give the exact reciprocal condition number
//! of `X'WX`, which is what the singularity check is stated in terms of.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerical thresholds shared by the regression kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Minimum reciprocal condition number of `X'WX`.
    pub rcond_min: f64,
    /// Max-abs score at which IRLS stops.
    pub score_tol: f64,
    pub max_iter: usize,
    /// Added to the IRLS Hessian diagonal when its Cholesky factorization fails.
    pub ridge: f64,
    /// |linear predictor| beyond which a non-converged fit is reported as separated.
    pub separation_eta: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rcond_min: 1e-12,
            score_tol: 1e-6,
            max_iter: 100,
            ridge: 1e-10,
            separation_eta: 30.0,
        }
    }
}

/// Dense design with a leading intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix(DMatrix<f64>);

impl DesignMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let (n, p) = m.shape();
        if p == 0 || n < p {
            return Err(Error::DimensionMismatch(format!(
                "design must have n >= p >= 1, got {n}x{p}"
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::DomainError("design contains non-finite entries".into()));
        }
        if m.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidSpec("first design column must be the intercept".into()));
        }
        Ok(Self(m))
    }

    /// Builds `[1, c_1, ..., c_q]` from covariate columns of length `n`.
    pub fn with_intercept(n: usize, columns: &[&[f64]]) -> Result<Self> {
        if let Some(c) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "column of length {} in design with {n} rows",
                c.len()
            )));
        }
        let m = DMatrix::from_fn(n, columns.len() + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                columns[j - 1][i]
            }
        });
        Self::new(m)
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Iptw,
    Overlap,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iptw" => Ok(Self::Iptw),
            "overlap" => Ok(Self::Overlap),
            other => Err(Error::InvalidSpec(format!("unknown weight scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    /// Always true for least squares.
    pub converged: bool,
    pub iterations: usize,
    /// IRLS needed the ridge fallback at least once.
    pub ridge_used: bool,
}

#[inline]
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_weights(w: &[f64]) -> Result<()> {
    let mut total = 0.0;
    for &wi in w {
        if !(wi.is_finite() && wi >= 0.0) {
            return Err(Error::DomainError(format!("invalid regression weight {wi}")));
        }
        total += wi;
    }
    if total <= 0.0 {
        return Err(Error::DomainError("regression weights sum to zero".into()));
    }
    Ok(())
}

/// Weighted least squares `argmin sum w_i (y_i - x_i'b)^2`.
pub fn wls(x: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<FitResult> {
    wls_with(x, y, w, &Tolerances::default())
}

pub fn wls_with(x: &DesignMatrix, y: &[f64], w: &[f64], tol: &Tolerances) -> Result<FitResult> {
    let mut coefs = wls_multi(x, &[y], w, tol)?;
    Ok(FitResult {
        coefficients: coefs.pop().unwrap_or_default(),
        converged: true,
        iterations: 1,
        ridge_used: false,
    })
}

/// Solves several responses against one weighted design with a single factorization.
pub fn wls_multi(
    x: &DesignMatrix,
    ys: &[&[f64]],
    w: &[f64],
    tol: &Tolerances,
) -> Result<Vec<Vec<f64>>> {
    let (n, p) = x.0.shape();
    if w.len() != n || ys.iter().any(|y| y.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows; weights {} and responses {:?}",
            w.len(),
            ys.iter().map(|y| y.len()).collect::<Vec<_>>()
        )));
    }
    check_weights(w)?;
    if let Some(v) = ys.iter().flat_map(|y| y.iter()).find(|v| !v.is_finite()) {
        return Err(Error::DomainError(format!("non-finite response value {v}")));
    }

    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let mut a = x.0.clone();
    for j in 0..p {
        for (v, s) in a.column_mut(j).iter_mut().zip(&sw) {
            *v *= s;
        }
    }
    let mut rhs = DMatrix::from_fn(n, ys.len(), |i, k| ys[k][i] * sw[i]);

    let qr = a.qr();
    let r = qr.r();
    let sv = r.singular_values();
    let (smax, smin) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    let rcond = if smax > 0.0 { (smin / smax).powi(2) } else { 0.0 };
    if !(rcond >= tol.rcond_min) {
        return Err(Error::SingularDesign {
            rcond,
            threshold: tol.rcond_min,
        });
    }
    qr.q_tr_mul(&mut rhs);
    let top = rhs.rows(0, p).into_owned();
    let sol = r
        .solve_upper_triangular(&top)
        .ok_or(Error::SingularDesign {
            rcond: 0.0,
            threshold: tol.rcond_min,
        })?;
    Ok((0..ys.len())
        .map(|k| sol.column(k).iter().copied().collect())
        .collect())
}

/// Heteroskedasticity-robust covariance of a weighted least-squares fit,
/// scaled by `n` (an estimate of `n Cov(b)`).
pub fn sandwich_cov(x: &DesignMatrix, y: &[f64], w: &[f64], coef: &[f64]) -> Result<DMatrix<f64>> {
    let (n, p) = x.0.shape();
    if y.len() != n || w.len() != n || coef.len() != p {
        return Err(Error::DimensionMismatch("sandwich inputs disagree in length".into()));
    }
    let b = DVector::from_column_slice(coef);
    let fitted = &x.0 * &b;
    let bread = weighted_gram(&x.0, w.iter().copied());
    let meat = weighted_gram(
        &x.0,
        (0..n).map(|i| {
            let e = w[i] * (y[i] - fitted[i]);
            e * e
        }),
    );
    let inv = bread
        .try_inverse()
        .ok_or(Error::SingularDesign { rcond: 0.0, threshold: 0.0 })?;
    Ok(&inv * meat * &inv * n as f64)
}

/// `X' diag(v) X`.
fn weighted_gram(x: &DMatrix<f64>, v: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let v = DVector::from_iterator(x.nrows(), v);
    let mut xv = x.clone();
    for mut col in xv.column_iter_mut() {
        col.component_mul_assign(&v);
    }
    x.tr_mul(&xv)
}

fn log_likelihood(eta: &DVector<f64>, a: &[f64]) -> f64 {
    eta.iter()
        .zip(a)
        .map(|(&e, &ai)| {
            // log(1 + e^eta) without overflow
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            ai * e - softplus
        })
        .sum()
}

/// Maximum-likelihood logistic regression by Newton/IRLS.
pub fn logistic_fit(x: &DesignMatrix, a: &[f64]) -> Result<FitResult> {
    logistic_fit_with(x, a, &Tolerances::default())
}

pub fn logistic_fit_with(x: &DesignMatrix, a: &[f64], tol: &Tolerances) -> Result<FitResult> {
    let (n, p) = x.0.shape();
    if a.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "treatment length {} vs design rows {n}",
            a.len()
        )));
    }
    if let Some(v) = a.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::DomainError(format!("treatment value {v} is not binary")));
    }
    let treated = a.iter().filter(|&&v| v == 1.0).count();
    if treated == 0 || treated == n {
        return Err(Error::SingleClass);
    }

    let mut beta = DVector::zeros(p);
    beta[0] = logit(treated as f64 / n as f64);
    let av = DVector::from_column_slice(a);
    let mut eta = &x.0 * &beta;
    let mut ll = log_likelihood(&eta, a);
    let mut ridge_used = false;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < tol.max_iter {
        let pi = eta.map(expit);
        let score = x.0.tr_mul(&(&av - &pi));

        let hess = weighted_gram(&x.0, pi.iter().map(|&q| q * (1.0 - q)));
        let chol = match Cholesky::new(hess.clone()) {
            Some(c) => c,
            None => {
                ridge_used = true;
                let mut h = hess;
                for j in 0..p {
                    h[(j, j)] += tol.ridge;
                }
                match Cholesky::new(h) {
                    Some(c) => c,
                    None => break,
                }
            }
        };
        let step = chol.solve(&score);
        // Under separation the score vanishes while Newton steps stay O(1).
        if score.amax() <= tol.score_tol && step.amax() <= tol.score_tol * (1.0 + beta.amax()) {
            converged = true;
            break;
        }
        iterations += 1;

        // Step halving keeps the likelihood monotone near separation.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let cand_eta = &x.0 * &cand;
            let cand_ll = log_likelihood(&cand_eta, a);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let max_eta = eta.amax();
    if max_eta > tol.separation_eta {
        return Err(Error::SeparationDetected { max_eta });
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::SeparationDetected { max_eta: f64::INFINITY });
    }
    Ok(FitResult {
        coefficients: beta.iter().copied().collect(),
        converged,
        iterations,
        ridge_used,
    })
}

/// Fitted probabilities `expit(X b)`.
pub fn predict_proba(x: &DesignMatrix, coef: &[f64]) -> Vec<f64> {
    let b = DVector::from_column_slice(coef);
    (&x.0 * b).iter().map(|&e| expit(e)).collect()
}

/// Balancing weights satisfying `pi w(1) = (1 - pi) w(0)`.
pub fn balance_weights(pi: &[f64], a: &[f64], scheme: WeightScheme) -> Result<Vec<f64>> {
    if pi.len() != a.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} propensities vs {} treatments",
            pi.len(),
            a.len()
        )));
    }
    pi.iter()
        .zip(a)
        .enumerate()
        .map(|(row, (&p, &ai))| match scheme {
            WeightScheme::Iptw => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::DegenerateScore { row, pi: p });
                }
                Ok(ai / p + (1.0 - ai) / (1.0 - p))
            }
            WeightScheme::Overlap => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::DomainError(format!("propensity {p} at row {row}")));
                }
                Ok((ai - p).abs())
            }
        })
        .collect()
}

/// Quantile of the chi-square distribution with one degree of freedom,
/// computed as a squared standard-normal quantile: `q = 2 erfinv(prob)^2`.
pub fn chisq_quantile(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::DomainError(format!("probability {prob} outside (0, 1)")));
    }
    let z = statrs::function::erf::erf_inv(prob);
    Ok(2.0 * z * z)
}
