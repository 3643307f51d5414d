//! Stochastic EM over the latent inflows and outflows.
//!
//! Each iteration simulates a fresh burn-in prefix of inflows, draws `(I, R)`
//! conditional on the observed differences district by district, and refits
//! the inflow GLM and the exit rates on the completed data. After the
//! uncorrected pre-run, every iteration additionally runs the bias
//! correction in [`crate::correction`].

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{corrected_iteration, CorrectionMode};
use crate::exit_rate::{
    exit_rate_covariance, fit_exit_rates_with, outflow_rate, ExitRateError, ExitRateFit, ExitRateOptions, ExitRates,
};
use crate::glm::basis::BasisSpec;
use crate::glm::{fit_poisson_with, predict_intensity, select_penalty_weights, GlmError, InflowFit, IrlsOptions};
use crate::grid::Grid;
use crate::panel::{build_covariates, compute_deltas, CovariateConfig, DeltaSeries, DesignMatrix, OccupancyPanel, PanelError, INTERCEPT};
use crate::rng::{Phase, Streams};
use crate::skellam::{sample_conditional_with, skellam_log_pmf, SkellamParams, INTENSITY_FLOOR};

/// One completed draw of the latent flows.
///
/// Inflows carry a burn-in prefix: column `burn_in + t` holds step `t`, so
/// steps `−burn_in..0` are simulated history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentFlows {
    burn_in: usize,
    inflow: Grid<u32>,
    outflow: Grid<u32>,
}

impl LatentFlows {
    pub fn new(burn_in: usize, inflow: Grid<u32>, outflow: Grid<u32>) -> Self {
        assert_eq!(inflow.districts(), outflow.districts(), "district count mismatch");
        assert_eq!(inflow.steps(), burn_in + outflow.steps(), "inflow must cover burn-in plus steps");
        Self {
            burn_in,
            inflow,
            outflow,
        }
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in
    }

    pub fn n_steps(&self) -> usize {
        self.outflow.steps()
    }

    pub fn n_districts(&self) -> usize {
        self.outflow.districts()
    }

    /// Inflow at step `t`, negative steps addressing the burn-in.
    #[inline]
    pub fn inflow(&self, district: usize, t: isize) -> u32 {
        let col = self.burn_in as isize + t;
        assert!(col >= 0, "step {t} precedes the burn-in");
        self.inflow.at(district, col as usize)
    }

    #[inline]
    pub fn outflow(&self, district: usize, t: usize) -> u32 {
        self.outflow.at(district, t)
    }

    /// Burn-in followed by observed-step inflows.
    pub fn inflow_row(&self, district: usize) -> &[u32] {
        self.inflow.row(district)
    }

    pub fn observed_inflow(&self, district: usize) -> &[u32] {
        &self.inflow.row(district)[self.burn_in..]
    }

    pub fn outflow_row(&self, district: usize) -> &[u32] {
        self.outflow.row(district)
    }

    pub fn inflow_grid(&self) -> &Grid<u32> {
        &self.inflow
    }

    pub fn outflow_grid(&self) -> &Grid<u32> {
        &self.outflow
    }

    /// Observed-step inflows as a GLM response, rows district-major.
    pub fn inflow_response(&self) -> Vec<f64> {
        (0..self.n_districts())
            .flat_map(|d| self.observed_inflow(d).iter().map(|&v| f64::from(v)))
            .collect()
    }

    /// `I − R` over the observed steps.
    pub fn deltas(&self) -> Grid<i64> {
        let rows = (0..self.n_districts())
            .map(|d| {
                self.observed_inflow(d)
                    .iter()
                    .zip(self.outflow_row(d))
                    .map(|(&i, &r)| i64::from(i) - i64::from(r))
                    .collect()
            })
            .collect();
        Grid::from_rows(rows)
    }
}

#[derive(Debug, Error)]
pub enum SemError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("inflow fit failed: {0}")]
    Glm(#[from] GlmError),
    #[error("exit-rate fit failed: {0}")]
    ExitRate(#[from] ExitRateError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemConfig {
    /// Maximum length of stay `L`.
    pub max_lag: usize,
    pub iterations_pre: usize,
    pub iterations_corrected: usize,
    /// Number of trailing iterations summarized.
    pub summary_window: usize,
    #[serde(skip)]
    pub seed: u64,
    /// Relative tail mass dropped when truncating the conditional PMF.
    pub tail_tol: f64,
    pub correction: CorrectionMode,
    pub glm_tol: f64,
    pub glm_max_iter: usize,
    pub exit_rate_tol: f64,
    pub exit_rate_max_iter: usize,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self {
            max_lag: 12,
            iterations_pre: 200,
            iterations_corrected: 200,
            summary_window: 200,
            seed: 0,
            tail_tol: crate::skellam::DEFAULT_TAIL_TOL,
            correction: CorrectionMode::Expand,
            glm_tol: 1e-8,
            glm_max_iter: 100,
            exit_rate_tol: 1e-8,
            exit_rate_max_iter: 200,
        }
    }
}

impl SemConfig {
    pub fn total_iterations(&self) -> usize {
        self.iterations_pre + self.iterations_corrected
    }

    pub fn validate(&self) -> Result<(), SemError> {
        let fail = |m: &str| Err(SemError::Config(m.to_string()));
        if self.max_lag == 0 {
            return fail("max_lag must be at least 1");
        }
        if self.iterations_pre == 0 {
            return fail("iterations_pre must be at least 1");
        }
        if self.summary_window == 0 {
            return fail("summary_window must be at least 1");
        }
        let phase_len = if self.iterations_corrected > 0 {
            self.iterations_corrected
        } else {
            self.iterations_pre
        };
        if self.summary_window > phase_len {
            return fail("summary_window exceeds the iterations of the final phase");
        }
        if !(self.tail_tol > 0.0 && self.tail_tol < 1.0) {
            return fail("tail_tol must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn irls_options(&self) -> IrlsOptions {
        IrlsOptions {
            max_iter: self.glm_max_iter,
            tol: self.glm_tol,
            ..IrlsOptions::default()
        }
    }

    pub fn exit_rate_options(&self) -> ExitRateOptions {
        ExitRateOptions {
            max_iter: self.exit_rate_max_iter,
            tol: self.exit_rate_tol,
            ..ExitRateOptions::default()
        }
    }

    /// Window `(k′, K)` over the last `summary_window` of `completed` iterations.
    pub fn window(&self, completed: usize) -> (usize, usize) {
        (completed.saturating_sub(self.summary_window), completed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pre,
    Corrected,
}

/// State after one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub stage: Stage,
    /// `Σ log Skellam(Δ; λ̂^I, λ̂^R)` at the iteration's estimates.
    pub loglik: f64,
    pub beta: Vec<f64>,
    pub beta_cov: Vec<Vec<f64>>,
    /// Exit rates carried forward (corrected in the corrected stage).
    pub omega: Vec<f64>,
    /// M-step exit rates before correction.
    pub omega_raw: Vec<f64>,
    pub omega_cov: Vec<Vec<f64>>,
    pub c_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clipped: Vec<bool>,
}

impl IterationRecord {
    pub fn beta_covariance(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.beta_cov)
    }

    pub fn omega_covariance(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.omega_cov)
    }
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub seed: u64,
    pub coefficient_names: Vec<String>,
    pub n_districts: usize,
    pub n_steps: usize,
    pub config: SemConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemTrace {
    pub header: TraceHeader,
    pub records: Vec<IterationRecord>,
}

impl SemTrace {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn record(&self, iteration: usize) -> Option<&IterationRecord> {
        self.records.iter().find(|r| r.iteration == iteration)
    }

    pub fn completed(&self) -> usize {
        self.records.last().map_or(0, |r| r.iteration)
    }
}

/// Outcome of a chain.
#[derive(Debug, Clone)]
pub struct SemRun {
    pub trace: SemTrace,
    /// Latent flows of the last `summary_window` completed iterations, oldest first.
    pub flows: Vec<(usize, LatentFlows)>,
    pub fit: InflowFit,
    pub omega: ExitRates,
    /// Design the chain was fitted on (after any penalty selection).
    pub design: DesignMatrix,
    /// Iterations that failed and were skipped, with the reason.
    pub failures: Vec<(usize, String)>,
    /// Set when the chain stopped after repeated fitter failures.
    pub aborted: Option<String>,
}

/// Poisson draw, zero for nonpositive or nonfinite intensity.
pub fn poisson_draw<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u32 {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return 0;
    }
    let x: f64 = Poisson::new(lambda).expect("positive finite intensity").sample(rng);
    x.min(f64::from(u32::MAX)) as u32
}

/// Independent Poisson inflows for `max_lag` steps before the first
/// observed step, at each district's first-step intensity.
pub fn burn_in_inflows(intensity_first: &[f64], max_lag: usize, streams: Streams) -> Grid<u32> {
    let rows = intensity_first
        .par_iter()
        .enumerate()
        .map(|(d, &lambda)| {
            let mut rng = streams.district(d);
            (0..max_lag).map(|_| poisson_draw(&mut rng, lambda)).collect()
        })
        .collect();
    Grid::from_rows(rows)
}

/// First-step column of an intensity grid.
pub fn first_step(intensity: &Grid<f64>) -> Vec<f64> {
    (0..intensity.districts()).map(|d| intensity.at(d, 0)).collect()
}

/// Draw `(I, R)` given the observed differences, sequentially in time
/// within each district and in parallel across districts.
pub fn e_step(
    deltas: &Grid<i64>,
    intensity: &Grid<f64>,
    omega: &ExitRates,
    burn_in: &Grid<u32>,
    streams: Streams,
    tail_tol: f64,
) -> LatentFlows {
    let n_districts = deltas.districts();
    let n_steps = deltas.steps();
    let lead = burn_in.steps();
    assert!(lead >= omega.max_lag(), "burn-in shorter than the maximum lag");
    assert_eq!(intensity.districts(), n_districts);
    assert_eq!(intensity.steps(), n_steps);
    let w = omega.as_slice();

    let rows: Vec<(Vec<u32>, Vec<u32>)> = (0..n_districts)
        .into_par_iter()
        .map(|d| {
            let mut rng = streams.district(d);
            let mut inflow = Vec::with_capacity(lead + n_steps);
            inflow.extend_from_slice(burn_in.row(d));
            let mut outflow = Vec::with_capacity(n_steps);
            for t in 0..n_steps {
                let base = lead + t;
                let lambda_out: f64 = w.iter().enumerate().map(|(k, p)| p * f64::from(inflow[base - k - 1])).sum();
                let params = SkellamParams {
                    lambda_in: intensity.at(d, t),
                    lambda_out,
                };
                let (i, r) = sample_conditional_with(deltas.at(d, t), params, tail_tol, &mut rng);
                inflow.push(i);
                outflow.push(r);
            }
            (inflow, outflow)
        })
        .collect();
    let (inflow, outflow): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    LatentFlows::new(lead, Grid::from_rows(inflow), Grid::from_rows(outflow))
}

/// Fitted inflow intensity on the design grid.
pub fn intensity_grid(fit: &InflowFit, design: &DesignMatrix) -> Result<Grid<f64>, GlmError> {
    Ok(Grid::from_vec(design.n_districts, design.n_steps, predict_intensity(fit, design)?))
}

/// Refit the inflow GLM on observed-step inflows and the exit rates on the
/// full flows.
pub fn m_step(
    flows: &LatentFlows,
    design: &DesignMatrix,
    max_lag: usize,
    start: Option<&InflowFit>,
    omega_init: &ExitRates,
    config: &SemConfig,
) -> Result<(InflowFit, ExitRateFit), SemError> {
    let y = flows.inflow_response();
    debug_assert_eq!(y.len(), design.nrows());
    let fit = fit_poisson_with(design, &y, None, start.map(|f| &f.coefficients), config.irls_options())?;
    let omega = fit_exit_rates_with(flows, max_lag, omega_init, config.exit_rate_options())?;
    Ok((fit, omega))
}

/// `Σ_(t,d) log Skellam(Δ; λ^I, λ^R)` with `λ^R` built from the drawn
/// inflow history.
pub fn observed_loglik(deltas: &Grid<i64>, intensity: &Grid<f64>, omega: &ExitRates, flows: &LatentFlows) -> f64 {
    let w = omega.as_slice();
    let per_district: Vec<f64> = (0..deltas.districts())
        .into_par_iter()
        .map(|d| {
            (0..deltas.steps())
                .map(|t| {
                    let params = SkellamParams {
                        lambda_in: intensity.at(d, t),
                        lambda_out: outflow_rate(w, flows, d, t),
                    }
                    .floored(INTENSITY_FLOOR);
                    skellam_log_pmf(deltas.at(d, t), params)
                })
                .sum()
        })
        .collect();
    per_district.iter().sum()
}

/// Intercept-only Poisson fit to `max(Δ, 0) + 1`, embedded in the full design.
pub fn initial_fit(deltas: &Grid<i64>, design: &DesignMatrix) -> InflowFit {
    let total: f64 = deltas.as_slice().iter().map(|&d| d.max(0) as f64 + 1.0).sum();
    let mean = total / deltas.as_slice().len().max(1) as f64;
    let mut beta = DVector::zeros(design.ncols());
    if let Some(j) = design.names.iter().position(|n| n == INTERCEPT) {
        beta[j] = mean.ln();
    }
    InflowFit::from_coefficients(design.names.clone(), beta)
}

struct Step {
    fit: InflowFit,
    omega: ExitRates,
    record: IterationRecord,
    flows: LatentFlows,
}

fn run_iteration(
    iteration: usize,
    stage: Stage,
    deltas: &Grid<i64>,
    design: &DesignMatrix,
    fit: &InflowFit,
    omega: &ExitRates,
    config: &SemConfig,
) -> Result<Step, SemError> {
    let seed = config.seed;
    let it = iteration as u64;
    let intensity = intensity_grid(fit, design)?;
    let burn = burn_in_inflows(&first_step(&intensity), config.max_lag, Streams::new(seed, it, Phase::BurnIn));
    let flows = e_step(
        deltas,
        &intensity,
        omega,
        &burn,
        Streams::new(seed, it, Phase::EStep),
        config.tail_tol,
    );
    let (raw_fit, raw_omega) = m_step(&flows, design, config.max_lag, Some(fit), omega, config)?;
    let raw_omega = raw_omega.omega;

    let (new_fit, new_omega, flows, c_hat, clipped) = match stage {
        Stage::Pre => (raw_fit, raw_omega.clone(), flows, None, Vec::new()),
        Stage::Corrected => {
            let out = corrected_iteration(deltas, design, &raw_fit, &raw_omega, config, iteration)?;
            (
                out.fit,
                out.estimate.omega_corrected.clone(),
                out.flows,
                Some(out.estimate.c_hat),
                out.estimate.clipped,
            )
        }
    };

    let new_intensity = intensity_grid(&new_fit, design)?;
    let loglik = observed_loglik(deltas, &new_intensity, &new_omega, &flows);
    let omega_cov = exit_rate_covariance(&new_omega, &flows)
        .unwrap_or_else(|_| DMatrix::zeros(config.max_lag, config.max_lag));
    let record = IterationRecord {
        iteration,
        stage,
        loglik,
        beta: new_fit.coefficients.iter().copied().collect(),
        beta_cov: matrix_to_rows(&new_fit.covariance),
        omega: new_omega.as_slice().to_vec(),
        omega_raw: raw_omega.as_slice().to_vec(),
        omega_cov: matrix_to_rows(&omega_cov),
        c_hat,
        clipped,
    };
    Ok(Step {
        fit: new_fit,
        omega: new_omega,
        record,
        flows,
    })
}

/// Consecutive failed iterations tolerated before the chain is abandoned.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

/// Run the chain from the default starting values.
pub fn run_sem(deltas: &DeltaSeries, design: &DesignMatrix, config: &SemConfig) -> Result<SemRun, SemError> {
    let fit = initial_fit(&deltas.delta, design);
    let omega = ExitRates::uniform(config.max_lag);
    run_sem_from(deltas, design, config, fit, omega)
}

/// Run the chain from given starting values.
pub fn run_sem_from(
    deltas: &DeltaSeries,
    design: &DesignMatrix,
    config: &SemConfig,
    mut fit: InflowFit,
    mut omega: ExitRates,
) -> Result<SemRun, SemError> {
    config.validate()?;
    if design.n_districts != deltas.n_districts() || design.n_steps != deltas.n_steps() {
        return Err(SemError::Config(format!(
            "design covers {}×{} cells, differences {}×{}",
            design.n_districts,
            design.n_steps,
            deltas.n_districts(),
            deltas.n_steps()
        )));
    }
    if omega.max_lag() != config.max_lag {
        return Err(SemError::Config("initial exit rates do not match max_lag".into()));
    }
    let header = TraceHeader {
        seed: config.seed,
        coefficient_names: design.names.clone(),
        n_districts: deltas.n_districts(),
        n_steps: deltas.n_steps(),
        config: config.clone(),
    };
    let mut records = Vec::new();
    let mut window: VecDeque<(usize, LatentFlows)> = VecDeque::new();
    let mut failures = 0;
    let mut skipped = Vec::new();
    let mut aborted = None;

    for iteration in 1..=config.total_iterations() {
        let stage = if iteration <= config.iterations_pre {
            Stage::Pre
        } else {
            Stage::Corrected
        };
        match run_iteration(iteration, stage, &deltas.delta, design, &fit, &omega, config) {
            Ok(step) => {
                failures = 0;
                fit = step.fit;
                omega = step.omega;
                records.push(step.record);
                window.push_back((iteration, step.flows));
                if window.len() > config.summary_window {
                    window.pop_front();
                }
            }
            Err(e) => {
                skipped.push((iteration, e.to_string()));
                failures += 1;
                if failures > MAX_CONSECUTIVE_FAILURES {
                    aborted = Some(format!("iteration {iteration}: {e}"));
                    break;
                }
            }
        }
    }
    Ok(SemRun {
        trace: SemTrace { header, records },
        flows: window.into_iter().collect(),
        fit,
        omega,
        design: design.clone(),
        failures: skipped,
        aborted,
    })
}

/// Penalty weights tried when `penalty_search` is on.
pub const PENALTY_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

/// Difference the panel, build its design and run the chain.
pub fn fit_panel(panel: &OccupancyPanel, covariates: &CovariateConfig, config: &SemConfig) -> Result<SemRun, SemError> {
    let deltas = compute_deltas(panel)?;
    let design = prepare_design(panel, &deltas, covariates)?;
    run_sem(&deltas, &design, config)
}

/// Design matrix, with penalty weights chosen on `max(Δ, 0) + 1` when requested.
pub fn prepare_design(
    panel: &OccupancyPanel,
    deltas: &DeltaSeries,
    covariates: &CovariateConfig,
) -> Result<DesignMatrix, SemError> {
    let design = build_covariates(panel, covariates)?;
    let BasisSpec { penalty_search, .. } = covariates.basis;
    if penalty_search && !design.penalty.is_empty() {
        let y: Vec<f64> = deltas.delta.as_slice().iter().map(|&d| d.max(0) as f64 + 1.0).collect();
        let (chosen, _) = select_penalty_weights(&design, &y, &PENALTY_GRID)?;
        return Ok(chosen);
    }
    Ok(design)
}
