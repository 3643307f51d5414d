use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::panel::{DesignMatrix, INTERCEPT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("response must be finite and nonnegative")]
    InvalidResponse,
    #[error("penalized information matrix is singular")]
    SingularInformation,
    #[error("IRLS did not converge in {iterations} iterations")]
    Nonconvergence { iterations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    /// Stop once `|Δ pdev| / (|pdev| + 0.1)` falls below this.
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            max_halvings: 10,
        }
    }
}

/// Fitted log-linear inflow model.
#[derive(Debug, Clone, PartialEq)]
pub struct InflowFit {
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    /// Inverse penalized Fisher information at the optimum.
    pub covariance: DMatrix<f64>,
    pub deviance: f64,
    pub loglik: f64,
    /// Effective degrees of freedom, `tr((XᵀWX + S)⁻¹ XᵀWX)`.
    pub edf: f64,
    pub iterations: usize,
}

impl InflowFit {
    /// Fit object with given coefficients and no fitted statistics.
    pub fn from_coefficients(names: Vec<String>, coefficients: DVector<f64>) -> Self {
        let p = coefficients.len();
        Self {
            names,
            coefficients,
            covariance: DMatrix::zeros(p, p),
            deviance: f64::NAN,
            loglik: f64::NAN,
            edf: f64::NAN,
            iterations: 0,
        }
    }

    pub fn aic(&self) -> f64 {
        -2.0 * self.loglik + 2.0 * self.edf
    }
}

pub fn linear_predictor(coefficients: &DVector<f64>, design: &DesignMatrix) -> Result<DVector<f64>, GlmError> {
    if coefficients.len() != design.ncols() {
        return Err(GlmError::DimensionMismatch {
            expected: design.ncols(),
            got: coefficients.len(),
        });
    }
    Ok(&design.x * coefficients)
}

/// `λ = exp(Xβ)` per design row.
pub fn predict_intensity(fit: &InflowFit, design: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
    Ok(linear_predictor(&fit.coefficients, design)?
        .iter()
        .map(|eta| eta.min(700.0).exp())
        .collect())
}

pub fn poisson_loglik(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let ylogm = if y == 0.0 { 0.0 } else { y * m.ln() };
            ylogm - m - ln_gamma(y + 1.0)
        })
        .sum()
}

fn deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let ylog = if y == 0.0 { 0.0 } else { y * (y / m).ln() };
            ylog - (y - m)
        })
        .sum::<f64>()
}

fn means(x: &DMatrix<f64>, beta: &DVector<f64>, offset: Option<&[f64]>) -> Vec<f64> {
    let eta = x * beta;
    eta.iter()
        .enumerate()
        .map(|(i, e)| (e + offset.map_or(0.0, |o| o[i])).min(700.0).exp())
        .collect()
}

/// `XᵀWX` with diagonal weights `w`.
fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        xw.row_mut(i).scale_mut(s);
    }
    xw.tr_mul(&xw)
}

fn default_start(design: &DesignMatrix, y: &[f64], offset: Option<&[f64]>) -> DVector<f64> {
    let mut beta = DVector::zeros(design.ncols());
    let total: f64 = y.iter().sum();
    let exposure: f64 = match offset {
        Some(o) => o.iter().map(|v| v.exp()).sum(),
        None => y.len() as f64,
    };
    let level = ((total + 0.1) / exposure).ln();
    let intercept = design
        .names
        .iter()
        .position(|n| n == INTERCEPT)
        .or_else(|| (0..design.ncols()).find(|&j| design.x.column(j).iter().all(|&v| v == 1.0)));
    if let Some(j) = intercept {
        beta[j] = level;
    }
    beta
}

/// Penalized Poisson fit by IRLS with default options.
pub fn fit_poisson(design: &DesignMatrix, y: &[f64], offset: Option<&[f64]>) -> Result<InflowFit, GlmError> {
    fit_poisson_with(design, y, offset, None, IrlsOptions::default())
}

/// Penalized Poisson fit by Newton/IRLS, maximizing
/// `Σ [y η − exp(η)] − ½ βᵀSβ` with step-halving on penalized deviance increase.
pub fn fit_poisson_with(
    design: &DesignMatrix,
    y: &[f64],
    offset: Option<&[f64]>,
    start: Option<&DVector<f64>>,
    options: IrlsOptions,
) -> Result<InflowFit, GlmError> {
    let n = design.nrows();
    if y.len() != n {
        return Err(GlmError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if let Some(o) = offset {
        if o.len() != n {
            return Err(GlmError::DimensionMismatch { expected: n, got: o.len() });
        }
    }
    if y.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(GlmError::InvalidResponse);
    }
    let x = &design.x;
    let s = design.penalty_matrix();
    let pdev = |beta: &DVector<f64>, mu: &[f64]| deviance(y, mu) + (beta.transpose() * &s * beta)[(0, 0)];

    let mut beta = match start {
        Some(b) if b.len() == design.ncols() && b.iter().all(|v| v.is_finite()) => b.clone(),
        _ => default_start(design, y, offset),
    };
    let mut mu = means(x, &beta, offset);
    let mut current = pdev(&beta, &mu);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let info = weighted_gram(x, &mu) + &s;
        let resid = DVector::from_iterator(n, y.iter().zip(&mu).map(|(y, m)| y - m));
        let score = x.tr_mul(&resid) - &s * &beta;
        let chol = info.cholesky().ok_or(GlmError::SingularInformation)?;
        let step = chol.solve(&score);

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let candidate = &beta + &step * scale;
            let cand_mu = means(x, &candidate, offset);
            let value = pdev(&candidate, &cand_mu);
            if value.is_finite() && value <= current + 1e-10 * current.abs().max(1.0) {
                accepted = Some((candidate, cand_mu, value));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, cand_mu, value)) = accepted else {
            // no descent along the Newton direction: already at the optimum
            // up to rounding
            converged = score.amax() < 1e-6 * (1.0 + current.abs());
            break;
        };
        let change = (current - value).abs() / (value.abs() + 0.1);
        // the deviance is flat near the optimum; also wait for a short
        // Newton step, after which the error is squared away
        let moved = (&candidate - &beta).amax() / (1.0 + candidate.amax());
        beta = candidate;
        mu = cand_mu;
        current = value;
        if (change < options.tol && moved < 1e-5) || change < options.tol * 1e-3 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GlmError::Nonconvergence { iterations });
    }

    let gram = weighted_gram(x, &mu);
    let info = &gram + &s;
    let covariance = info
        .clone()
        .cholesky()
        .ok_or(GlmError::SingularInformation)?
        .inverse();
    let edf = (&covariance * &gram).trace();
    Ok(InflowFit {
        names: design.names.clone(),
        coefficients: beta,
        covariance,
        deviance: deviance(y, &mu),
        loglik: poisson_loglik(y, &mu),
        edf,
        iterations,
    })
}

/// Choose penalty weights for every smooth block on a log grid by AIC.
/// Returns the design carrying the chosen weights and its fit.
pub fn select_penalty_weights(
    design: &DesignMatrix,
    y: &[f64],
    grid: &[f64],
) -> Result<(DesignMatrix, InflowFit), GlmError> {
    let blocks = design.penalty.len();
    let mut best: Option<(DesignMatrix, InflowFit)> = None;
    let combos = grid.len().pow(blocks as u32);
    for code in 0..combos.max(1) {
        let mut candidate = design.clone();
        let mut c = code;
        for block in candidate.penalty.iter_mut() {
            block.weight = grid[c % grid.len()];
            c /= grid.len();
        }
        let fit = match fit_poisson(&candidate, y, None) {
            Ok(f) => f,
            Err(_) => continue,
        };
        if best.as_ref().is_none_or(|(_, b)| fit.aic() < b.aic()) {
            best = Some((candidate, fit));
        }
    }
    best.ok_or(GlmError::SingularInformation)
}
