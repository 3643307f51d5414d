//! Exit-rate estimation on the probability simplex.
//!
//! Outflows are Poisson with mean `μ(t, d) = Σ_l ω_l I(t − l, d)`. The
//! partial log-likelihood of `ω` is maximized by sequential quadratic
//! approximation in the reduced parameters `ω_1..ω_{L−1}` (with
//! `ω_L = 1 − Σ_{l<L} ω_l`), each subproblem solved under `ω_l ≥ 0` and
//! `Σ_{l<L} ω_l ≤ 1`.

pub mod qp;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::basis::CubicBSpline;
use crate::grid::Grid;
use crate::sem::LatentFlows;
use qp::{projected_gradient, solve_dual, QpError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExitRateError {
    #[error("exit rates must be a nonempty, finite, nonnegative vector summing to one")]
    NotOnSimplex,
    #[error("outflow {outflow} at step {step} of district {district} has zero expected rate")]
    ZeroRateWithPositiveOutflow { district: usize, step: usize, outflow: u32 },
    #[error("flows carry {available} burn-in steps, {required} needed")]
    InsufficientHistory { required: usize, available: usize },
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Exit probabilities `ω_1..ω_L` by days since entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ExitRates(Vec<f64>);

impl ExitRates {
    pub const SIMPLEX_TOL: f64 = 1e-10;

    pub fn new(values: Vec<f64>) -> Result<Self, ExitRateError> {
        let ok = !values.is_empty()
            && values.iter().all(|v| v.is_finite() && *v >= 0.0)
            && (values.iter().sum::<f64>() - 1.0).abs() <= Self::SIMPLEX_TOL;
        if ok {
            Ok(Self(values))
        } else {
            Err(ExitRateError::NotOnSimplex)
        }
    }

    pub fn uniform(max_lag: usize) -> Self {
        assert!(max_lag >= 1);
        Self(vec![1.0 / max_lag as f64; max_lag])
    }

    /// Clip negatives and rescale to unit sum.
    pub fn normalized(values: Vec<f64>) -> Result<Self, ExitRateError> {
        let clipped: Vec<f64> = values.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
        let total: f64 = clipped.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(ExitRateError::NotOnSimplex);
        }
        Ok(Self(clipped.into_iter().map(|v| v / total).collect()))
    }

    /// Full vector from the `L − 1` free parameters.
    pub fn from_free(free: &[f64]) -> Result<Self, ExitRateError> {
        let last = 1.0 - free.iter().sum::<f64>();
        let mut v = free.to_vec();
        v.push(last);
        Self::normalized(v)
    }

    pub fn max_lag(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn free(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }

    /// Zero-extend to `max_lag` entries.
    pub fn padded(&self, max_lag: usize) -> Self {
        assert!(max_lag >= self.0.len());
        let mut v = self.0.clone();
        v.resize(max_lag, 0.0);
        Self(v)
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<f64>> for ExitRates {
    type Error = ExitRateError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ExitRates> for Vec<f64> {
    fn from(w: ExitRates) -> Self {
        w.0
    }
}

fn check_history(flows: &LatentFlows, max_lag: usize) -> Result<(), ExitRateError> {
    if flows.burn_in() < max_lag {
        return Err(ExitRateError::InsufficientHistory {
            required: max_lag,
            available: flows.burn_in(),
        });
    }
    Ok(())
}

/// Expected outflow `Σ_l ω_l I(t − l, d)`.
#[inline]
pub fn outflow_rate(omega: &[f64], flows: &LatentFlows, district: usize, step: usize) -> f64 {
    let row = flows.inflow_row(district);
    let base = flows.burn_in() + step;
    omega
        .iter()
        .enumerate()
        .map(|(k, w)| w * f64::from(row[base - k - 1]))
        .sum()
}

/// Copy of `flows` with outflows removed from cells whose whole lag history
/// is empty. Such cells have zero expected rate under every `ω`, so they
/// only shift the log-likelihood by a constant. `None` when there are none.
fn drop_orphan_outflows(flows: &LatentFlows, max_lag: usize) -> Option<LatentFlows> {
    let mut outflow: Option<Grid<u32>> = None;
    for d in 0..flows.n_districts() {
        let row = flows.inflow_row(d);
        for t in 0..flows.n_steps() {
            let base = flows.burn_in() + t;
            if flows.outflow(d, t) > 0 && row[base - max_lag..base].iter().all(|&v| v == 0) {
                outflow
                    .get_or_insert_with(|| flows.outflow_grid().clone())
                    .set(d, t, 0);
            }
        }
    }
    outflow.map(|o| LatentFlows::new(flows.burn_in(), flows.inflow_grid().clone(), o))
}

/// Partial log-likelihood `Σ R log μ − μ` over all observed cells.
pub fn partial_loglik(omega: &ExitRates, flows: &LatentFlows) -> Result<f64, ExitRateError> {
    check_history(flows, omega.max_lag())?;
    let w = omega.as_slice();
    let mut total = 0.0;
    for d in 0..flows.n_districts() {
        let mut acc = 0.0;
        for t in 0..flows.n_steps() {
            let mu = outflow_rate(w, flows, d, t);
            let r = flows.outflow(d, t);
            if mu > 0.0 {
                acc += f64::from(r) * mu.ln() - mu;
            } else if r > 0 {
                return Err(ExitRateError::ZeroRateWithPositiveOutflow {
                    district: d,
                    step: t,
                    outflow: r,
                });
            }
        }
        total += acc;
    }
    Ok(total)
}

/// Local quadratic model `gᵀ(x − c) − ½ (x − c)ᵀH(x − c)` over the free
/// exit-rate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Observed information (negative Hessian), PSD.
    pub hessian: DMatrix<f64>,
    /// Score at `center`.
    pub gradient: DVector<f64>,
    pub center: DVector<f64>,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let dx = x - &self.center;
        self.gradient.dot(&dx) - 0.5 * dx.dot(&(&self.hessian * &dx))
    }
}

/// Score and observed information of the partial log-likelihood in the
/// reduced parameterization.
pub fn score_fisher(omega: &ExitRates, flows: &LatentFlows) -> Result<QpProblem, ExitRateError> {
    let max_lag = omega.max_lag();
    check_history(flows, max_lag)?;
    let free = max_lag - 1;
    let w = omega.as_slice();
    let mut gradient = DVector::zeros(free);
    let mut hessian = DMatrix::zeros(free, free);
    let mut contrast = vec![0.0; free];
    for d in 0..flows.n_districts() {
        let row = flows.inflow_row(d);
        for t in 0..flows.n_steps() {
            let base = flows.burn_in() + t;
            let last = f64::from(row[base - max_lag]);
            for (l, c) in contrast.iter_mut().enumerate() {
                *c = f64::from(row[base - l - 1]) - last;
            }
            let mu = outflow_rate(w, flows, d, t);
            let r = f64::from(flows.outflow(d, t));
            if mu <= 0.0 {
                if r > 0.0 {
                    return Err(ExitRateError::ZeroRateWithPositiveOutflow {
                        district: d,
                        step: t,
                        outflow: r as u32,
                    });
                }
                for (g, c) in gradient.iter_mut().zip(&contrast) {
                    *g -= c;
                }
                continue;
            }
            let factor = r / mu - 1.0;
            for (g, c) in gradient.iter_mut().zip(&contrast) {
                *g += c * factor;
            }
            if r > 0.0 {
                let weight = r / (mu * mu);
                for j in 0..free {
                    let cj = contrast[j] * weight;
                    if cj == 0.0 {
                        continue;
                    }
                    for k in j..free {
                        hessian[(j, k)] += cj * contrast[k];
                    }
                }
            }
        }
    }
    for j in 0..free {
        for k in 0..j {
            hessian[(j, k)] = hessian[(k, j)];
        }
    }
    Ok(QpProblem {
        hessian,
        gradient,
        center: DVector::from_column_slice(omega.free()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Constraint indices: `i < n` is `x_i ≥ 0`, `n` is `Σx ≤ 1`.
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
    /// Whether the projected-gradient fallback produced `x`.
    pub fallback: bool,
}

/// Maximize the quadratic model over `{x ≥ 0, Σx ≤ 1}`.
pub fn qp_solve(problem: &QpProblem) -> Result<QpSolution, ExitRateError> {
    let n = problem.dim();
    if n == 0 {
        return Ok(QpSolution {
            x: DVector::zeros(0),
            active: Vec::new(),
            multipliers: Vec::new(),
            fallback: false,
        });
    }
    let g = &problem.hessian;
    let a = -(&problem.gradient + g * &problem.center);
    let mut constraints: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            e
        })
        .collect();
    constraints.push(DVector::from_element(n, -1.0));
    let mut bounds = vec![0.0; n];
    bounds.push(-1.0);

    match solve_dual(g, &a, &constraints, &bounds, 50 * (n + 1)) {
        Ok(sol) => Ok(QpSolution {
            x: sol.x,
            active: sol.active,
            multipliers: sol.multipliers,
            fallback: false,
        }),
        Err(QpError::CycleLimit) => {
            let x = projected_gradient(g, &a, &problem.center, 100_000);
            Ok(QpSolution {
                x,
                active: Vec::new(),
                multipliers: Vec::new(),
                fallback: true,
            })
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitRateOptions {
    pub max_iter: usize,
    /// Stop when no exit rate moves by more than this.
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for ExitRateOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitRateFit {
    pub omega: ExitRates,
    pub loglik: f64,
    /// Quadratic subproblems solved.
    pub iterations: usize,
    pub converged: bool,
    /// No inflow anywhere: the likelihood does not depend on `ω`.
    pub flat: bool,
}

fn mix(a: &ExitRates, b: &ExitRates, weight_b: f64) -> ExitRates {
    ExitRates::normalized(
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (1.0 - weight_b) * x + weight_b * y)
            .collect(),
    )
    .expect("convex combination of simplex points")
}

/// Maximize the partial log-likelihood over the simplex by sequential QP.
pub fn fit_exit_rates(flows: &LatentFlows, max_lag: usize, init: &ExitRates) -> Result<ExitRateFit, ExitRateError> {
    fit_exit_rates_with(flows, max_lag, init, ExitRateOptions::default())
}

pub fn fit_exit_rates_with(
    flows: &LatentFlows,
    max_lag: usize,
    init: &ExitRates,
    options: ExitRateOptions,
) -> Result<ExitRateFit, ExitRateError> {
    check_history(flows, max_lag)?;
    if init.max_lag() != max_lag {
        return Err(ExitRateError::NotOnSimplex);
    }
    let masked = drop_orphan_outflows(flows, max_lag);
    let flows = masked.as_ref().unwrap_or(flows);
    if max_lag == 1 {
        let omega = ExitRates(vec![1.0]);
        let loglik = partial_loglik(&omega, flows)?;
        return Ok(ExitRateFit {
            omega,
            loglik,
            iterations: 0,
            converged: true,
            flat: false,
        });
    }
    let flat = (0..flows.n_districts()).all(|d| flows.inflow_row(d).iter().all(|&v| v == 0));
    if flat {
        let loglik = partial_loglik(init, flows)?;
        return Ok(ExitRateFit {
            omega: init.clone(),
            loglik,
            iterations: 0,
            converged: true,
            flat: true,
        });
    }

    // a start on the boundary may give zero rate to an observed outflow
    let uniform = ExitRates::uniform(max_lag);
    let mut current = init.clone();
    let mut current_ll = partial_loglik(&current, flows);
    for weight in [0.5, 1.0] {
        if current_ll.is_ok() {
            break;
        }
        current = mix(init, &uniform, weight);
        current_ll = partial_loglik(&current, flows);
    }
    let mut current_ll = current_ll?;

    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iter {
        iterations += 1;
        let problem = score_fisher(&current, flows)?;
        let solution = qp_solve(&problem)?;
        let target = ExitRates::from_free(solution.x.as_slice())?;

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let candidate = if step == 1.0 { target.clone() } else { mix(&current, &target, step) };
            if let Ok(ll) = partial_loglik(&candidate, flows) {
                if ll >= current_ll - 1e-12 * current_ll.abs().max(1.0) {
                    accepted = Some((candidate, ll));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((candidate, ll)) = accepted else {
            converged = true;
            break;
        };
        let change = candidate.max_abs_diff(current.as_slice());
        current = candidate;
        current_ll = ll;
        if change < options.tol {
            converged = true;
            break;
        }
    }
    Ok(ExitRateFit {
        omega: current,
        loglik: current_ll,
        iterations,
        converged,
        flat: false,
    })
}

/// Covariance of the full exit-rate vector: the pseudo-inverse of the
/// observed information on the free parameters, mapped through
/// `ω_L = 1 − Σ_{l<L} ω_l`.
pub fn exit_rate_covariance(omega: &ExitRates, flows: &LatentFlows) -> Result<DMatrix<f64>, ExitRateError> {
    let max_lag = omega.max_lag();
    if max_lag == 1 {
        return Ok(DMatrix::zeros(1, 1));
    }
    let problem = score_fisher(omega, flows)?;
    let free = max_lag - 1;
    let inv = problem
        .hessian
        .clone()
        .pseudo_inverse(1e-10 * problem.hessian.amax().max(1e-300))
        .unwrap_or_else(|_| DMatrix::zeros(free, free));
    let jac = DMatrix::from_fn(max_lag, free, |i, j| {
        if i == free {
            -1.0
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    let cov = &jac * inv * jac.transpose();
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Length-of-stay summaries implied by an exit-rate vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LosSummary {
    pub mean_los: f64,
    pub cumulative_exit: Vec<f64>,
    /// Smallest day by which at least the given share has left.
    pub quantile_days: BTreeMap<String, usize>,
}

pub const LOS_QUANTILES: [f64; 5] = [0.25, 0.5, 0.75, 0.8, 0.9];

pub fn quantile_day(cumulative: &[f64], q: f64) -> usize {
    cumulative
        .iter()
        .position(|&c| c >= q - 1e-12)
        .map_or(cumulative.len(), |i| i + 1)
}

pub fn los_summaries(omega: &ExitRates) -> LosSummary {
    let w = omega.as_slice();
    let mean_los = w.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum();
    let cumulative_exit: Vec<f64> = w
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let quantile_days = LOS_QUANTILES
        .iter()
        .map(|&q| (format!("{q}"), quantile_day(&cumulative_exit, q)))
        .collect();
    LosSummary {
        mean_los,
        cumulative_exit,
        quantile_days,
    }
}

/// Penalized cubic-spline smooth of per-lag values, for reporting only.
pub fn smooth_exit_rates(values: &[f64], penalty: f64) -> Vec<f64> {
    let n = values.len();
    if n < 4 {
        return values.to_vec();
    }
    let size = n.min(8);
    let spline = CubicBSpline::new(size, 1.0, n as f64).expect("size ≥ 4");
    let b = DMatrix::from_fn(n, size, |i, j| spline.evaluate((i + 1) as f64)[j]);
    let lhs = b.tr_mul(&b) + spline.difference_penalty() * penalty;
    let rhs = b.tr_mul(&DVector::from_column_slice(values));
    match lhs.cholesky() {
        Some(c) => (b * c.solve(&rhs)).iter().copied().collect(),
        None => values.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn flows(burn_in: usize, inflow: Vec<Vec<u32>>, outflow: Vec<Vec<u32>>) -> LatentFlows {
        LatentFlows::new(burn_in, Grid::from_rows(inflow), Grid::from_rows(outflow))
    }

    #[test]
    fn simplex_validation() {
        assert!(ExitRates::new(vec![0.5, 0.5]).is_ok());
        assert!(ExitRates::new(vec![0.5, 0.6]).is_err());
        assert!(ExitRates::new(vec![-0.1, 1.1]).is_err());
        assert!(ExitRates::new(vec![]).is_err());
        let w = ExitRates::from_free(&[0.2, 0.3]).unwrap();
        assert!((w.as_slice()[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_cell_loglik() {
        let f = flows(1, vec![vec![5, 0]], vec![vec![3]]);
        let ll = partial_loglik(&ExitRates::uniform(1), &f).unwrap();
        assert!((ll - (3.0 * 5f64.ln() - 5.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_system_loglik_is_zero() {
        let f = flows(2, vec![vec![0; 5]], vec![vec![0; 3]]);
        assert_eq!(partial_loglik(&ExitRates::uniform(2), &f).unwrap(), 0.0);
    }

    #[test]
    fn zero_rate_with_outflow_is_an_error() {
        let f = flows(1, vec![vec![0, 0]], vec![vec![2]]);
        assert!(matches!(
            partial_loglik(&ExitRates::uniform(1), &f),
            Err(ExitRateError::ZeroRateWithPositiveOutflow { outflow: 2, .. })
        ));
    }

    #[test]
    fn outflow_without_history_is_ignored_by_the_fit() {
        // the last cell has no inflow in either lag but a drawn outflow
        let f = flows(2, vec![vec![3, 1, 6, 2, 0, 0, 0]], vec![vec![2, 4, 3, 0, 1]]);
        assert!(partial_loglik(&ExitRates::uniform(2), &f).is_err());
        let fit = fit_exit_rates(&f, 2, &ExitRates::uniform(2)).unwrap();
        let kept = flows(2, vec![vec![3, 1, 6, 2, 0, 0, 0]], vec![vec![2, 4, 3, 0, 0]]);
        let reference = fit_exit_rates(&kept, 2, &ExitRates::uniform(2)).unwrap();
        assert!(fit.omega.max_abs_diff(reference.omega.as_slice()) < 1e-12);
    }

    #[test]
    fn insufficient_history() {
        let f = flows(1, vec![vec![1, 1]], vec![vec![1]]);
        assert!(matches!(
            partial_loglik(&ExitRates::uniform(2), &f),
            Err(ExitRateError::InsufficientHistory { required: 2, available: 1 })
        ));
    }

    #[test]
    fn symmetric_history_has_zero_score() {
        // I(t−1) = I(t−2) everywhere
        let f = flows(2, vec![vec![4, 4, 4, 4, 4, 4]], vec![vec![3, 5, 4, 6]]);
        let w = ExitRates::new(vec![0.5, 0.5]).unwrap();
        let p = score_fisher(&w, &f).unwrap();
        assert_eq!(p.gradient[0], 0.0);
    }

    #[test]
    fn one_lag_is_immediate() {
        let f = flows(1, vec![vec![3, 2, 4]], vec![vec![2, 3]]);
        let fit = fit_exit_rates(&f, 1, &ExitRates::uniform(1)).unwrap();
        assert_eq!(fit.omega.as_slice(), &[1.0]);
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn closed_system_is_flat() {
        let f = flows(3, vec![vec![0; 8]], vec![vec![0; 5]]);
        let init = ExitRates::new(vec![0.2, 0.3, 0.5]).unwrap();
        let fit = fit_exit_rates(&f, 3, &init).unwrap();
        assert!(fit.flat);
        assert_eq!(fit.omega, init);
    }

    #[test]
    fn feasible_unconstrained_optimum_is_returned() {
        let problem = QpProblem {
            hessian: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            gradient: DVector::from_vec(vec![0.1, -0.05]),
            center: DVector::from_vec(vec![0.3, 0.3]),
        };
        let sol = qp_solve(&problem).unwrap();
        let newton = &problem.center + problem.hessian.clone().lu().solve(&problem.gradient).unwrap();
        assert!((sol.x - newton).amax() < 1e-12);
        assert!(sol.active.is_empty());
    }

    #[test]
    fn negative_optimum_clamps_to_zero() {
        let problem = QpProblem {
            hessian: DMatrix::from_element(1, 1, 1.0),
            gradient: DVector::from_element(1, -2.0),
            center: DVector::from_element(1, 0.5),
        };
        let sol = qp_solve(&problem).unwrap();
        assert_eq!(sol.x[0], 0.0);
        assert_eq!(sol.active, vec![0]);
    }

    #[test]
    fn los_point_mass_and_uniform() {
        let s = los_summaries(&ExitRates::uniform(1));
        assert_eq!(s.mean_los, 1.0);
        assert_eq!(s.quantile_days["0.5"], 1);
        let s = los_summaries(&ExitRates::uniform(4));
        assert!((s.mean_los - 2.5).abs() < 1e-15);
        for (c, e) in s.cumulative_exit.iter().zip([0.25, 0.5, 0.75, 1.0]) {
            assert!((c - e).abs() < 1e-15);
        }
        assert_eq!(s.quantile_days["0.5"], 2);
        assert_eq!(s.quantile_days["0.9"], 4);
    }

    #[test]
    fn smoothing_keeps_lines() {
        let v: Vec<f64> = (0..10).map(|i| 0.2 - 0.015 * i as f64).collect();
        let s = smooth_exit_rates(&v, 1.0);
        for (a, b) in v.iter().zip(&s) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
