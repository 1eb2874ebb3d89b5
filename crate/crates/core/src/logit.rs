//! Binary logistic regression by maximum likelihood, with Wald inference.
//!
//! The fit maximizes `Σ y log p + (1 − y) log(1 − p)`, `p = σ(β·[1, x])`,
//! by Newton-Raphson (IRLS). Each step solves `I(β) δ = ∇ℓ(β)` with a
//! Cholesky factorization of the information matrix `XᵀWX`; a singular
//! matrix gets one retry with `1e-8` added to its diagonal. Steps that would
//! lower the log-likelihood are halved until they do not.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::stats::{sigmoid, softplus, two_sided_p};

pub const INTERCEPT: &str = "intercept";
pub const RIDGE: f64 = 1e-8;
/// ‖β‖∞ beyond this is treated as divergence caused by separation.
pub const SEPARATION_BOUND: f64 = 30.0;
/// Every fitted probability within this of its label also counts as separation.
pub const PERFECT_FIT_GAP: f64 = 1e-6;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogitError {
    #[error("need more rows than parameters: {rows} rows for {params} parameters")]
    TooFewRows { rows: usize, params: usize },
    #[error("design has {x_rows} rows but {y_len} labels")]
    LengthMismatch { x_rows: usize, y_len: usize },
    #[error("{names} feature names for {cols} columns")]
    NameMismatch { names: usize, cols: usize },
    #[error("design matrix contains a non-finite value")]
    NonFinite,
    #[error("label {0} is not 0 or 1")]
    NonBinary(u8),
    #[error("information matrix is singular even with a {RIDGE} ridge")]
    SingularDesign,
    #[error("inference unavailable: {0}")]
    InferenceUnavailable(&'static str),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    /// Intercept first.
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    pub std_err: Vec<f64>,
    pub z_score: Vec<f64>,
    /// Two-sided Wald p-values; all 1.0 when the fit did not converge.
    pub p_value: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separation_detected: bool,
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

pub fn log_likelihood(design: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    eta.iter()
        .zip(y.iter())
        .map(|(&e, &yi)| yi * e - softplus(e))
        .sum()
}

/// Score `Xᵀ(y − p)` and information `XᵀWX` at `beta`.
pub fn score_and_information(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let eta = design * beta;
    let p = eta.map(sigmoid);
    let score = design.tr_mul(&(y - &p));
    let mut weighted = design.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= p[i] * (1.0 - p[i]);
    }
    let info = design.tr_mul(&weighted);
    (score, info)
}

fn cholesky_with_ridge(info: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, LogitError> {
    if let Some(c) = info.clone().cholesky() {
        return Ok(c);
    }
    let k = info.nrows();
    (info + DMatrix::<f64>::identity(k, k) * RIDGE)
        .cholesky()
        .ok_or(LogitError::SingularDesign)
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits `y ~ [1, x]`. `feature_names` labels the columns of `x`.
pub fn fit_logit(
    x: &DMatrix<f64>,
    y: &[u8],
    feature_names: &[String],
    opts: &LogitOptions,
) -> Result<LogitFit, LogitError> {
    let (n, m) = x.shape();
    if y.len() != n {
        return Err(LogitError::LengthMismatch { x_rows: n, y_len: y.len() });
    }
    if feature_names.len() != m {
        return Err(LogitError::NameMismatch { names: feature_names.len(), cols: m });
    }
    if n <= m + 1 {
        return Err(LogitError::TooFewRows { rows: n, params: m + 1 });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LogitError::NonFinite);
    }
    if let Some(&bad) = y.iter().find(|&&v| v > 1) {
        return Err(LogitError::NonBinary(bad));
    }

    let design = with_intercept(x);
    let yv = DVector::from_iterator(n, y.iter().map(|&v| v as f64));
    let mut beta = DVector::zeros(m + 1);
    let mut ll = log_likelihood(&design, &yv, &beta);
    let mut converged = false;
    let mut separation_detected = false;
    let mut small_improvement = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let (score, info) = score_and_information(&design, &yv, &beta);
        if max_abs(&score) < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = cholesky_with_ridge(&info)?.solve(&score);

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &beta + &step * t;
            let cand_ll = log_likelihood(&design, &yv, &cand);
            if cand_ll >= ll {
                accepted = Some((cand, cand_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_ll)) = accepted else {
            // no ascent direction left at working precision
            converged = true;
            break;
        };
        let improvement = cand_ll - ll;
        beta = cand;
        ll = cand_ll;

        if max_abs(&beta) > SEPARATION_BOUND {
            separation_detected = true;
            break;
        }
        // an improvement below tol twice in a row: the first small step may
        // still leave a sizable score, the quadratic step after it does not
        if improvement < opts.tol {
            if small_improvement {
                converged = true;
                break;
            }
            small_improvement = true;
        } else {
            small_improvement = false;
        }
    }

    // a separable sample can satisfy the score test long before ‖β‖ reaches
    // the bound; fitted probabilities that reproduce every label give it away
    let fitted = (&design * &beta).map(sigmoid);
    if fitted.iter().zip(yv.iter()).all(|(p, y)| (p - y).abs() < PERFECT_FIT_GAP) {
        separation_detected = true;
    }
    if separation_detected {
        converged = false;
    }

    let (_, info) = score_and_information(&design, &yv, &beta);
    let k = m + 1;
    let cov = cholesky_with_ridge(&info)?.solve(&DMatrix::identity(k, k));
    let std_err: Vec<f64> = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let z_score: Vec<f64> = beta
        .iter()
        .zip(&std_err)
        .map(|(b, s)| if *s > 0.0 { b / s } else { 0.0 })
        .collect();

    let mut names = Vec::with_capacity(k);
    names.push(INTERCEPT.to_string());
    names.extend(feature_names.iter().cloned());

    let mut fit = LogitFit {
        feature_names: names,
        beta: beta.iter().copied().collect(),
        std_err,
        z_score,
        p_value: vec![1.0; k],
        log_likelihood: ll,
        iterations,
        converged,
        separation_detected,
    };
    if let Ok(p) = wald_pvalues(&fit) {
        fit.p_value = p;
    }
    Ok(fit)
}

pub fn fit_dataset(ds: &LabeledDataset, opts: &LogitOptions) -> Result<LogitFit, LogitError> {
    fit_logit(&ds.x, &ds.y, &ds.feature_names, opts)
}

/// `σ(β₀ + Σ βⱼ xⱼ)`.
pub fn predict_proba(fit: &LogitFit, x: &[f64]) -> Result<f64, LogitError> {
    let expected = fit.beta.len() - 1;
    if x.len() != expected {
        return Err(LogitError::DimensionMismatch { expected, got: x.len() });
    }
    let eta = fit.beta[0] + fit.beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
    Ok(sigmoid(eta))
}

/// Two-sided Wald p-values `2(1 − Φ(|β/se|))`.
pub fn wald_pvalues(fit: &LogitFit) -> Result<Vec<f64>, LogitError> {
    if !fit.converged {
        return Err(LogitError::InferenceUnavailable("fit did not converge"));
    }
    if fit.std_err.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(LogitError::InferenceUnavailable("non-positive standard error"));
    }
    Ok(fit
        .beta
        .iter()
        .zip(&fit.std_err)
        .map(|(b, s)| two_sided_p(b / s))
        .collect())
}

/// Non-intercept features with `p < alpha`, in column order.
pub fn select_features(fit: &LogitFit, alpha: f64) -> Vec<String> {
    fit.feature_names
        .iter()
        .zip(&fit.p_value)
        .skip(1)
        .filter(|(_, p)| **p < alpha)
        .map(|(n, _)| n.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub beta: f64,
    pub std_err: f64,
    pub z: f64,
    pub p: f64,
}

/// JSON document emitted by the `logit` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitReport {
    pub ticker: String,
    pub coefficients: Vec<CoefficientRow>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separation_detected: bool,
    pub alpha: f64,
    pub selected: Vec<String>,
}

impl LogitReport {
    pub fn new(ticker: &str, fit: &LogitFit, alpha: f64) -> Self {
        Self {
            ticker: ticker.to_string(),
            coefficients: (0..fit.beta.len())
                .map(|j| CoefficientRow {
                    name: fit.feature_names[j].clone(),
                    beta: fit.beta[j],
                    std_err: fit.std_err[j],
                    z: fit.z_score[j],
                    p: fit.p_value[j],
                })
                .collect(),
            log_likelihood: fit.log_likelihood,
            iterations: fit.iterations,
            converged: fit.converged,
            separation_detected: fit.separation_detected,
            alpha,
            selected: select_features(fit, alpha),
        }
    }
}
