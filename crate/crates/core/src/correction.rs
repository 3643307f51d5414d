//! Correction of the pull of `ω̂` towards the discrete uniform `1/L`.
//!
//! The fitted model is simulated without conditioning on the data, the
//! exit rates are re-estimated on the simulation, and the squared deviations
//! from `1/L` of the refit are regressed on those of the estimate that
//! generated it. The resulting ratio `ĉ` measures the shrinkage, which is
//! then undone on the estimate itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exit_rate::{fit_exit_rates_with, ExitRateError, ExitRateFit, ExitRateOptions, ExitRates};
use crate::glm::{fit_poisson_with, InflowFit};
use crate::grid::Grid;
use crate::panel::DesignMatrix;
use crate::rng::{Phase, Streams};
use crate::sem::{burn_in_inflows, e_step, first_step, intensity_grid, poisson_draw, LatentFlows, SemConfig, SemError};

/// How `ĉ` is applied to the raw exit rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// Scale squared deviations by `1/ĉ`, moving away from `1/L`.
    #[default]
    Expand,
    /// Scale squared deviations by `ĉ`.
    Shrink,
    /// Keep the raw estimate.
    Off,
}

impl CorrectionMode {
    pub fn factor(self, c_hat: f64) -> f64 {
        match self {
            CorrectionMode::Expand => 1.0 / c_hat,
            CorrectionMode::Shrink => c_hat,
            CorrectionMode::Off => 1.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectionError {
    #[error("reference exit rates are uniform; the shrinkage factor is undefined")]
    DegenerateReference,
    #[error("exit-rate vectors differ in length ({0} vs {1})")]
    LagMismatch(usize, usize),
}

/// Bounds applied to `ĉ` before use.
pub const C_HAT_BOUNDS: (f64, f64) = (0.01, 100.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEstimate {
    pub c_hat: f64,
    pub omega_raw: ExitRates,
    pub omega_corrected: ExitRates,
    /// Lags whose corrected value fell below zero.
    pub clipped: Vec<bool>,
    /// The reference was uniform and the raw estimate was passed through.
    pub degenerate: bool,
}

/// One unconditional draw from the fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedFlows {
    pub flows: LatentFlows,
    pub deltas: Grid<i64>,
}

/// `Ĩ ~ Poisson(λ^I)` with a fresh burn-in at the first-step intensity and
/// `R̃ ~ Poisson(Σ_l ω_l Ĩ(t − l))`, without any constraint on `Ĩ − R̃`.
pub fn simulate_unconditional(intensity: &Grid<f64>, omega: &ExitRates, streams: Streams) -> SimulatedFlows {
    use rayon::prelude::*;
    let lag = omega.max_lag();
    let w = omega.as_slice();
    let n_steps = intensity.steps();
    let rows: Vec<(Vec<u32>, Vec<u32>)> = (0..intensity.districts())
        .into_par_iter()
        .map(|d| {
            let mut rng = streams.district(d);
            let first = intensity.at(d, 0);
            let mut inflow: Vec<u32> = (0..lag).map(|_| poisson_draw(&mut rng, first)).collect();
            let mut outflow = Vec::with_capacity(n_steps);
            for t in 0..n_steps {
                let i = poisson_draw(&mut rng, intensity.at(d, t));
                let base = lag + t;
                let mu: f64 = w.iter().enumerate().map(|(k, p)| p * f64::from(inflow[base - k - 1])).sum();
                outflow.push(poisson_draw(&mut rng, mu));
                inflow.push(i);
            }
            (inflow, outflow)
        })
        .collect();
    let (inflow, outflow): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let flows = LatentFlows::new(lag, Grid::from_rows(inflow), Grid::from_rows(outflow));
    let deltas = flows.deltas();
    SimulatedFlows { flows, deltas }
}

/// One conditional E-step on simulated differences followed by an exit-rate
/// refit warm-started at `omega`.
pub fn inner_em_refit(
    deltas: &Grid<i64>,
    intensity: &Grid<f64>,
    omega: &ExitRates,
    burn_streams: Streams,
    e_streams: Streams,
    tail_tol: f64,
    options: ExitRateOptions,
) -> Result<ExitRateFit, ExitRateError> {
    let burn = burn_in_inflows(&first_step(intensity), omega.max_lag(), burn_streams);
    let flows = e_step(deltas, intensity, omega, &burn, e_streams, tail_tol);
    fit_exit_rates_with(&flows, omega.max_lag(), omega, options)
}

/// Least-squares ratio `Σ a b / Σ a²` of squared deviations from `1/L`,
/// `a` from the reference and `b` from the refit.
pub fn estimate_c(reference: &ExitRates, refit: &ExitRates) -> Result<f64, CorrectionError> {
    let l = reference.max_lag();
    if refit.max_lag() != l {
        return Err(CorrectionError::LagMismatch(l, refit.max_lag()));
    }
    let u = 1.0 / l as f64;
    let (mut ab, mut aa) = (0.0, 0.0);
    for (r, f) in reference.as_slice().iter().zip(refit.as_slice()) {
        let a = (r - u).powi(2);
        let b = (f - u).powi(2);
        ab += a * b;
        aa += a * a;
    }
    if aa == 0.0 {
        return Err(CorrectionError::DegenerateReference);
    }
    Ok(ab / aa)
}

/// Scale each squared deviation from `1/L` by `factor`, keep its side,
/// clip at zero and renormalize.
pub fn correct_omega(omega: &ExitRates, factor: f64) -> (ExitRates, Vec<bool>) {
    assert!(factor >= 0.0 && factor.is_finite(), "correction factor must be finite and nonnegative");
    let u = 1.0 / omega.max_lag() as f64;
    let scale = factor.sqrt();
    let raw: Vec<f64> = omega.as_slice().iter().map(|&w| u + (w - u) * scale).collect();
    let clipped: Vec<bool> = raw.iter().map(|&v| v < 0.0).collect();
    let corrected = ExitRates::normalized(raw).expect("at least one lag is at or above 1/L");
    (corrected, clipped)
}

/// Result of a corrected iteration.
#[derive(Debug, Clone)]
pub struct CorrectedOutcome {
    pub fit: InflowFit,
    pub estimate: CorrectionEstimate,
    /// Conditional draws on the observed differences under the corrected rates.
    pub flows: LatentFlows,
}

/// Simulate, refit, estimate `ĉ`, correct `ω̂`, redraw the observed-data
/// flows under the corrected rates and refit the inflow model.
pub fn corrected_iteration(
    deltas: &Grid<i64>,
    design: &DesignMatrix,
    raw_fit: &InflowFit,
    raw_omega: &ExitRates,
    config: &SemConfig,
    iteration: usize,
) -> Result<CorrectedOutcome, SemError> {
    let seed = config.seed;
    let it = iteration as u64;
    let intensity = intensity_grid(raw_fit, design)?;

    let sim = simulate_unconditional(&intensity, raw_omega, Streams::new(seed, it, Phase::Simulate));
    let refit = inner_em_refit(
        &sim.deltas,
        &intensity,
        raw_omega,
        Streams::new(seed, it, Phase::InnerBurnIn),
        Streams::new(seed, it, Phase::InnerEStep),
        config.tail_tol,
        config.exit_rate_options(),
    )?;

    let (c_hat, degenerate) = match estimate_c(raw_omega, &refit.omega) {
        Ok(c) => (c.clamp(C_HAT_BOUNDS.0, C_HAT_BOUNDS.1), false),
        Err(_) => (1.0, true),
    };
    let factor = if degenerate { 1.0 } else { config.correction.factor(c_hat) };
    let (omega_corrected, clipped) = correct_omega(raw_omega, factor);

    let burn = burn_in_inflows(
        &first_step(&intensity),
        config.max_lag,
        Streams::new(seed, it, Phase::CorrectedBurnIn),
    );
    let flows = e_step(
        deltas,
        &intensity,
        &omega_corrected,
        &burn,
        Streams::new(seed, it, Phase::CorrectedEStep),
        config.tail_tol,
    );
    let fit = fit_poisson_with(
        design,
        &flows.inflow_response(),
        None,
        Some(&raw_fit.coefficients),
        config.irls_options(),
    )?;

    Ok(CorrectedOutcome {
        fit,
        estimate: CorrectionEstimate {
            c_hat,
            omega_raw: raw_omega.clone(),
            omega_corrected,
            clipped,
            degenerate,
        },
        flows,
    })
}
