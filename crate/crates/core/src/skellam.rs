//! Skellam probabilities and conditional sampling of `(I, R)` given `I − R = Δ`.
//!
//! Everything is evaluated in log space. Successive joint terms
//!
//! ```text
//! p(i) ∝ e^{−λI} λI^i · e^{−λR} λR^{i−Δ} / (i! (i−Δ)!),   i ≥ max(0, Δ)
//! ```
//!
//! are generated by the ratio `p(i+1)/p(i) = λI·λR / ((i+1)(i+1−Δ))`, which
//! is unimodal in `i`, so the walk can stop once it is past the mode and the
//! remaining mass is negligible.

use rand::Rng;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Tail tolerance used when choosing the truncation bound.
pub const DEFAULT_TAIL_TOL: f64 = 1e-10;

/// Lower clamp applied to both intensities inside the sampler.
pub const INTENSITY_FLOOR: f64 = 1e-10;

/// Relative size (log scale) below which walked terms are dropped.
const LOG_NEGLIGIBLE: f64 = -60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkellamError {
    #[error("intensities must be finite and nonnegative, got ({lambda_in}, {lambda_out})")]
    InvalidIntensity { lambda_in: f64, lambda_out: f64 },
    #[error("truncation bound {i_max} leaves no admissible inflow for delta {delta}")]
    EmptySupport { delta: i64, i_max: i64 },
    #[error("no probability mass for delta {delta} under the given intensities")]
    ZeroMass { delta: i64 },
}

/// Inflow and outflow intensities of a Skellam variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkellamParams {
    pub lambda_in: f64,
    pub lambda_out: f64,
}

impl SkellamParams {
    pub fn new(lambda_in: f64, lambda_out: f64) -> Result<Self, SkellamError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if ok(lambda_in) && ok(lambda_out) {
            Ok(Self { lambda_in, lambda_out })
        } else {
            Err(SkellamError::InvalidIntensity { lambda_in, lambda_out })
        }
    }

    /// Clamp both intensities below at `floor`.
    pub fn floored(self, floor: f64) -> Self {
        Self {
            lambda_in: self.lambda_in.max(floor),
            lambda_out: self.lambda_out.max(floor),
        }
    }

    fn swapped(self) -> Self {
        Self {
            lambda_in: self.lambda_out,
            lambda_out: self.lambda_in,
        }
    }
}

/// `k·ln(λ)` with `0·ln 0 = 0`.
fn xlog(k: i64, lambda: f64) -> f64 {
    if k == 0 {
        0.0
    } else {
        k as f64 * lambda.ln()
    }
}

fn ln_factorial(k: i64) -> f64 {
    debug_assert!(k >= 0);
    if k < 2 {
        0.0
    } else {
        ln_gamma(k as f64 + 1.0)
    }
}

/// Exact log of the joint term at inflow `i` (not normalized).
pub fn log_joint_term(i: i64, delta: i64, params: SkellamParams) -> f64 {
    let r = i - delta;
    if i < 0 || r < 0 {
        return f64::NEG_INFINITY;
    }
    -params.lambda_in - params.lambda_out + xlog(i, params.lambda_in) + xlog(r, params.lambda_out)
        - ln_factorial(i)
        - ln_factorial(r)
}

#[inline]
fn lowest_inflow(delta: i64) -> i64 {
    delta.max(0)
}

/// Log joint terms from `max(0, Δ)` upward until the remaining mass is
/// negligible (or `stop_at` is reached). Returns the starting inflow and the
/// terms. Degenerate intensities give a single admissible point.
fn walk_terms(delta: i64, params: SkellamParams, stop_at: Option<i64>) -> (i64, Vec<f64>) {
    let start = lowest_inflow(delta);
    let first = log_joint_term(start, delta, params);
    if params.lambda_in == 0.0 || params.lambda_out == 0.0 {
        return (start, vec![first]);
    }
    let log_rate = params.lambda_in.ln() + params.lambda_out.ln();
    let mut terms = vec![first];
    let mut current = first;
    let mut best = first;
    let mut i = start;
    loop {
        if let Some(limit) = stop_at {
            if i >= limit {
                break;
            }
        }
        let next_i = i + 1;
        let ratio_log = log_rate - (next_i as f64).ln() - ((next_i - delta) as f64).ln();
        current += ratio_log;
        i = next_i;
        terms.push(current);
        if current > best {
            best = current;
        }
        // Past the mode once the ratio drops below one; from there the terms
        // shrink at least geometrically.
        if stop_at.is_none() && ratio_log < -std::f64::consts::LN_2 && current - best < LOG_NEGLIGIBLE {
            break;
        }
    }
    (start, terms)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `ln P(Δ = delta)` for `Δ ~ Skellam(λI, λR)`.
pub fn skellam_log_pmf(delta: i64, params: SkellamParams) -> f64 {
    let (_, terms) = walk_terms(delta, params, None);
    log_sum_exp(&terms)
}

/// `P(Δ = delta)` for `Δ ~ Skellam(λI, λR)`, the Poisson convolution
/// `Σ_i Pois(i; λI)·Pois(i − δ; λR)`.
pub fn skellam_pmf(delta: i64, params: SkellamParams) -> f64 {
    skellam_log_pmf(delta, params).exp()
}

/// Smallest `m ≥ max(0, Δ)` with the joint mass above `m` below
/// `tail_tol` times the mass at or below `m`.
pub fn choose_imax(delta: i64, params: SkellamParams, tail_tol: f64) -> i64 {
    assert!(tail_tol > 0.0 && tail_tol < 1.0, "tail_tol must lie in (0, 1)");
    let (start, terms) = walk_terms(delta, params, None);
    start + truncation_index(&terms, tail_tol) as i64
}

fn truncation_index(terms: &[f64], tail_tol: f64) -> usize {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return 0;
    }
    let weights: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
    let mut suffix = vec![0.0; weights.len() + 1];
    for k in (0..weights.len()).rev() {
        suffix[k] = suffix[k + 1] + weights[k];
    }
    let total = suffix[0];
    for m in 0..weights.len() {
        let below = total - suffix[m + 1];
        if suffix[m + 1] < tail_tol * below {
            return m;
        }
    }
    weights.len() - 1
}

/// Normalized joint PMF of `(I = i, R = i − Δ)` restricted to `i ≤ i_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedJointPmf {
    pub delta: i64,
    /// Smallest admissible inflow, `max(0, Δ)`.
    pub i_min: i64,
    pub i_max: i64,
    /// Probabilities for `i = i_min..=i_max`.
    pub probs: Vec<f64>,
}

impl TruncatedJointPmf {
    fn from_log_terms(delta: i64, i_min: i64, log_terms: &[f64]) -> Result<Self, SkellamError> {
        let norm = log_sum_exp(log_terms);
        if !norm.is_finite() {
            return Err(SkellamError::ZeroMass { delta });
        }
        let probs = log_terms.iter().map(|t| (t - norm).exp()).collect::<Vec<_>>();
        Ok(Self {
            delta,
            i_min,
            i_max: i_min + log_terms.len() as i64 - 1,
            probs,
        })
    }

    /// `(i, r, p)` over the support.
    pub fn support(&self) -> impl Iterator<Item = (i64, i64, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(move |(k, &p)| {
                let i = self.i_min + k as i64;
                (i, i - self.delta, p)
            })
    }

    pub fn prob(&self, i: i64) -> f64 {
        if i < self.i_min || i > self.i_max {
            0.0
        } else {
            self.probs[(i - self.i_min) as usize]
        }
    }

    pub fn mean_inflow(&self) -> f64 {
        self.support().map(|(i, _, p)| i as f64 * p).sum()
    }

    pub fn mean_outflow(&self) -> f64 {
        self.support().map(|(_, r, p)| r as f64 * p).sum()
    }

    /// Inverse-CDF draw from a uniform `u ∈ [0, 1)`.
    pub fn invert(&self, u: f64) -> (i64, i64) {
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                let i = self.i_min + k as i64;
                return (i, i - self.delta);
            }
        }
        // rounding left u above the accumulated total: take the last point
        // carrying mass
        let k = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        let i = self.i_min + k as i64;
        (i, i - self.delta)
    }
}

/// Joint PMF of `(I, R)` given `I − R = Δ`, truncated at `i_max`.
pub fn truncated_joint_pmf(
    delta: i64,
    params: SkellamParams,
    i_max: i64,
) -> Result<TruncatedJointPmf, SkellamError> {
    let i_min = lowest_inflow(delta);
    if i_max < i_min {
        return Err(SkellamError::EmptySupport { delta, i_max });
    }
    let terms = if params.lambda_in == 0.0 || params.lambda_out == 0.0 {
        (i_min..=i_max).map(|i| log_joint_term(i, delta, params)).collect::<Vec<_>>()
    } else {
        walk_terms(delta, params, Some(i_max)).1
    };
    TruncatedJointPmf::from_log_terms(delta, i_min, &terms)
}

/// Truncated conditional PMF with `i_max` chosen by [`choose_imax`], using a
/// single walk over the terms. Intensities are floored at [`INTENSITY_FLOOR`].
pub fn conditional_pmf(delta: i64, params: SkellamParams, tail_tol: f64) -> TruncatedJointPmf {
    let params = params.floored(INTENSITY_FLOOR);
    let (start, terms) = walk_terms(delta, params, None);
    let m = truncation_index(&terms, tail_tol);
    TruncatedJointPmf::from_log_terms(delta, start, &terms[..=m])
        .expect("floored intensities always leave mass")
}

/// Draw `(i, r)` with `i − r = Δ` from the truncated conditional PMF.
/// Consumes exactly one uniform from `rng`.
pub fn sample_conditional<R: Rng + ?Sized>(delta: i64, params: SkellamParams, rng: &mut R) -> (u32, u32) {
    sample_conditional_with(delta, params, DEFAULT_TAIL_TOL, rng)
}

pub fn sample_conditional_with<R: Rng + ?Sized>(
    delta: i64,
    params: SkellamParams,
    tail_tol: f64,
    rng: &mut R,
) -> (u32, u32) {
    let pmf = conditional_pmf(delta, params, tail_tol);
    let u: f64 = rng.random();
    let (i, r) = pmf.invert(u);
    (i as u32, r as u32)
}

/// Skellam PMF with the roles of the two intensities exchanged; used by the
/// symmetry property `P(δ; λI, λR) = P(−δ; λR, λI)`.
pub fn skellam_pmf_mirrored(delta: i64, params: SkellamParams) -> f64 {
    skellam_pmf(-delta, params.swapped())
}
