//! Chain summaries: medians, percentile bands and the within/between
//! variance combination over a window of iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exit_rate::{smooth_exit_rates, ExitRates};
use crate::glm::basis::TIME_LABEL;
use crate::panel::DesignMatrix;
use crate::sem::{IterationRecord, SemTrace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("window ({start}, {end}] holds {len} iterations, at least 2 needed")]
    WindowTooShort { start: usize, end: usize, len: usize },
    #[error("window end {end} exceeds the {available} iterations available")]
    WindowOutOfRange { end: usize, available: usize },
    #[error("inconsistent dimensions in chain draws")]
    DimensionMismatch,
}

/// Type-7 sample quantile (linear interpolation between order statistics).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

fn check_window(window: (usize, usize), available: usize) -> Result<(), InferenceError> {
    let (start, end) = window;
    if end > available {
        return Err(InferenceError::WindowOutOfRange { end, available });
    }
    let len = end.saturating_sub(start);
    if len < 2 {
        return Err(InferenceError::WindowTooShort { start, end, len });
    }
    Ok(())
}

/// Mean of the covariances of iterations `k′+1..=K` plus the sample
/// covariance of the corresponding draws. Entry `k − 1` of each slice
/// belongs to iteration `k`.
pub fn rubin_variance(
    betas: &[DVector<f64>],
    covariances: &[DMatrix<f64>],
    window: (usize, usize),
) -> Result<DMatrix<f64>, InferenceError> {
    check_window(window, betas.len().min(covariances.len()))?;
    let (start, end) = window;
    let draws = &betas[start..end];
    let covs = &covariances[start..end];
    let p = draws[0].len();
    if draws.iter().any(|b| b.len() != p) || covs.iter().any(|c| c.shape() != (p, p)) {
        return Err(InferenceError::DimensionMismatch);
    }
    let n = draws.len() as f64;
    let within = covs.iter().fold(DMatrix::zeros(p, p), |acc, c| acc + c) / n;
    let mean = draws.iter().fold(DVector::zeros(p), |acc, b| acc + b) / n;
    let between = draws.iter().fold(DMatrix::zeros(p, p), |acc, b| {
        let d = b - &mean;
        acc + &d * d.transpose()
    }) / (n - 1.0);
    Ok(within + between)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub window: (usize, usize),
    pub coefficient_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub coefficient_sd: Vec<f64>,
    pub omega: Vec<f64>,
    pub omega_sd: Vec<f64>,
    pub omega_lo: Vec<f64>,
    pub omega_hi: Vec<f64>,
    /// Penalized spline smooth of the median exit rates.
    pub omega_smooth: Vec<f64>,
    /// Cumulative exit of the renormalized median curve.
    pub cumulative_exit: Vec<f64>,
    pub c_hat_median: Option<f64>,
}

/// Smoothing weight of the reported exit-rate curve.
pub const EXIT_RATE_SMOOTHING: f64 = 1.0;
pub const BAND: (f64, f64) = (0.025, 0.975);

fn window_records(trace: &SemTrace, window: (usize, usize)) -> Result<Vec<&IterationRecord>, InferenceError> {
    check_window(window, trace.completed())?;
    let (start, end) = window;
    let records: Vec<_> = trace
        .records
        .iter()
        .filter(|r| r.iteration > start && r.iteration <= end)
        .collect();
    if records.len() < 2 {
        return Err(InferenceError::WindowTooShort {
            start,
            end,
            len: records.len(),
        });
    }
    Ok(records)
}

fn columnwise<F: Fn(&IterationRecord) -> &[f64]>(records: &[&IterationRecord], field: F) -> Vec<Vec<f64>> {
    let p = field(records[0]).len();
    (0..p).map(|j| records.iter().map(|r| field(r)[j]).collect()).collect()
}

/// Summarize iterations `k′+1..=K` of a trace.
pub fn summarize_chain(trace: &SemTrace, window: (usize, usize)) -> Result<ChainSummary, InferenceError> {
    let records = window_records(trace, window)?;
    let n = records.len();

    let betas: Vec<DVector<f64>> = records.iter().map(|r| DVector::from_column_slice(&r.beta)).collect();
    let beta_covs: Vec<DMatrix<f64>> = records.iter().map(|r| r.beta_covariance()).collect();
    let beta_var = rubin_variance(&betas, &beta_covs, (0, n))?;
    let omegas: Vec<DVector<f64>> = records.iter().map(|r| DVector::from_column_slice(&r.omega)).collect();
    let omega_covs: Vec<DMatrix<f64>> = records.iter().map(|r| r.omega_covariance()).collect();
    let omega_var = rubin_variance(&omegas, &omega_covs, (0, n))?;

    let sd = |m: &DMatrix<f64>| m.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect::<Vec<_>>();
    let beta_cols = columnwise(&records, |r| &r.beta);
    let omega_cols = columnwise(&records, |r| &r.omega);
    let omega: Vec<f64> = omega_cols.iter().map(|c| median(c)).collect();
    let omega_lo = omega_cols.iter().map(|c| quantile(c, BAND.0)).collect();
    let omega_hi = omega_cols.iter().map(|c| quantile(c, BAND.1)).collect();
    let cumulative_exit = match ExitRates::normalized(omega.clone()) {
        Ok(w) => w
            .as_slice()
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect(),
        Err(_) => vec![0.0; omega.len()],
    };
    let c_hats: Vec<f64> = records.iter().filter_map(|r| r.c_hat).collect();

    Ok(ChainSummary {
        window,
        coefficient_names: trace.header.coefficient_names.clone(),
        coefficients: beta_cols.iter().map(|c| median(c)).collect(),
        coefficient_sd: sd(&beta_var),
        omega_sd: sd(&omega_var),
        omega_smooth: smooth_exit_rates(&omega, EXIT_RATE_SMOOTHING),
        omega,
        omega_lo,
        omega_hi,
        cumulative_exit,
        c_hat_median: (!c_hats.is_empty()).then(|| median(&c_hats)),
    })
}

/// Pointwise median and band of one smooth term over the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothBand {
    pub label: String,
    /// Step index for a time term, district index for a spatial term.
    pub index: Vec<usize>,
    pub median: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Evaluate every penalized block of `design` at each windowed draw.
pub fn smooth_bands(trace: &SemTrace, design: &DesignMatrix, window: (usize, usize)) -> Result<Vec<SmoothBand>, InferenceError> {
    let records = window_records(trace, window)?;
    if records.iter().any(|r| r.beta.len() != design.ncols()) {
        return Err(InferenceError::DimensionMismatch);
    }
    let mut out = Vec::new();
    for block in &design.penalty {
        let k = block.matrix.nrows();
        // time terms vary along steps of one district, spatial terms across districts
        let along_time = block.label == TIME_LABEL;
        let rows: Vec<(usize, usize)> = if along_time {
            (0..design.n_steps).map(|s| (s, design.row_of(s, 0))).collect()
        } else {
            (0..design.n_districts).map(|d| (d, design.row_of(0, d))).collect()
        };
        let values: Vec<Vec<f64>> = rows
            .iter()
            .map(|&(_, row)| {
                records
                    .iter()
                    .map(|r| (0..k).map(|j| design.x[(row, block.start + j)] * r.beta[block.start + j]).sum())
                    .collect()
            })
            .collect();
        out.push(SmoothBand {
            label: block.label.clone(),
            index: rows.iter().map(|&(i, _)| i).collect(),
            median: values.iter().map(|v| median(v)).collect(),
            lo: values.iter().map(|v| quantile(v, BAND.0)).collect(),
            hi: values.iter().map(|v| quantile(v, BAND.1)).collect(),
        });
    }
    Ok(out)
}
