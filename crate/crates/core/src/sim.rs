//! Synthetic occupancy panels with known flows.
//!
//! Two covariates drive the inflow intensity `exp(β0 + β1 x1 + β2 x2)`:
//! `x1 ~ Gamma(0.1, rate 0.5)` fixed per district and `x2 ~ Gamma(1, rate 3)`
//! per cell. Every admitted unit draws a length of stay from a truncated
//! geometric distribution and leaves exactly once.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exit_rate::ExitRates;
use crate::glm::basis::Centroid;
use crate::grid::Grid;
use crate::panel::{District, OccupancyPanel};
use crate::rng::{Phase, StreamRng, Streams};
use crate::sem::{poisson_draw, LatentFlows};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InflowFamily {
    Poisson,
    /// Mean `λ`, variance `λ + λ²/θ`.
    NegativeBinomial { theta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub districts: usize,
    pub days: usize,
    pub family: InflowFamily,
    pub beta: [f64; 3],
    pub los_decay: f64,
    /// Longest possible stay.
    pub los_max: usize,
    /// Lag used when fitting; ground truth is zero-padded to it.
    pub fit_lag: usize,
    pub start_date: NaiveDate,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            districts: 200,
            days: 200,
            family: InflowFamily::Poisson,
            beta: [0.5, 1.0, 0.2],
            los_decay: 0.4,
            los_max: 10,
            fit_lag: 12,
            start_date: NaiveDate::from_ymd_opt(2021, 8, 1).expect("valid date"),
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(&'static str),
}

impl SimSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.districts == 0 || self.days < 2 {
            return Err(SimError::InvalidSpec("need at least one district and two days"));
        }
        if self.los_max == 0 {
            return Err(SimError::InvalidSpec("los_max must be at least 1"));
        }
        if self.fit_lag < self.los_max {
            return Err(SimError::InvalidSpec("fit_lag must be at least los_max"));
        }
        if !self.los_decay.is_finite() {
            return Err(SimError::InvalidSpec("los_decay must be finite"));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(SimError::InvalidSpec("beta must be finite"));
        }
        if let InflowFamily::NegativeBinomial { theta } = self.family {
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(SimError::InvalidSpec("theta must be positive"));
            }
        }
        Ok(())
    }

    /// Days of simulated inflow before day 1.
    pub fn pre_history(&self) -> usize {
        self.los_max.max(self.fit_lag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub x1: Vec<f64>,
    /// `x2[d][t]` for days `1..=T`.
    pub x2: Grid<f64>,
}

const TAG_X1: u64 = 1;
const TAG_X2: u64 = 2;
const TAG_INFLOW: u64 = 3;
const TAG_OUTFLOW: u64 = 4;
const TAG_CENTROID: u64 = 5;

fn streams(spec: &SimSpec, tag: u64) -> Streams {
    Streams::new(spec.seed, 0, Phase::Generator).fork(tag)
}

/// `x1_d ~ Gamma(0.1, rate 0.5)`, `x2_(t,d) ~ Gamma(1, rate 3)`.
pub fn gen_covariates(spec: &SimSpec) -> Covariates {
    let g1 = Gamma::new(0.1, 2.0).expect("valid gamma");
    let g2 = Gamma::new(1.0, 1.0 / 3.0).expect("valid gamma");
    let s1 = streams(spec, TAG_X1);
    let s2 = streams(spec, TAG_X2);
    let x1 = (0..spec.districts).map(|d| g1.sample(&mut s1.district(d))).collect();
    let rows = (0..spec.districts)
        .into_par_iter()
        .map(|d| {
            let mut rng = s2.district(d);
            (0..spec.days).map(|_| g2.sample(&mut rng)).collect()
        })
        .collect();
    Covariates {
        x1,
        x2: Grid::from_rows(rows),
    }
}

/// `π_l ∝ exp(−decay · l)` for `l = 1..=max_lag`.
pub fn gen_exit_distribution(decay: f64, max_lag: usize) -> ExitRates {
    let raw: Vec<f64> = (1..=max_lag).map(|l| (-decay * l as f64).exp()).collect();
    ExitRates::normalized(raw).expect("positive weights")
}

/// Inflow intensity `exp(β0 + β1 x1 + β2 x2)` per district and day.
pub fn inflow_intensity(spec: &SimSpec, cov: &Covariates) -> Grid<f64> {
    let [b0, b1, b2] = spec.beta;
    let data = (0..spec.districts)
        .flat_map(|d| {
            let x1 = cov.x1[d];
            cov.x2.row(d).iter().map(move |&x2| (b0 + b1 * x1 + b2 * x2).exp())
        })
        .collect();
    Grid::from_vec(spec.districts, spec.days, data)
}

/// One inflow count from the chosen family.
pub fn draw_inflow<R: Rng + ?Sized>(family: InflowFamily, lambda: f64, rng: &mut R) -> u32 {
    match family {
        InflowFamily::Poisson => poisson_draw(rng, lambda),
        InflowFamily::NegativeBinomial { theta } => {
            let mix = Gamma::new(theta, lambda / theta).expect("positive gamma parameters").sample(rng);
            poisson_draw(rng, mix)
        }
    }
}

/// Inflows for `pre_history` days at the day-1 intensity followed by days
/// `1..=T`.
pub fn gen_inflows(spec: &SimSpec, intensity: &Grid<f64>) -> Grid<u32> {
    let s = streams(spec, TAG_INFLOW);
    let pre = spec.pre_history();
    let rows = (0..spec.districts)
        .into_par_iter()
        .map(|d| {
            let mut rng = s.district(d);
            let first = intensity.at(d, 0);
            let mut row: Vec<u32> = (0..pre).map(|_| draw_inflow(spec.family, first, &mut rng)).collect();
            row.extend(intensity.row(d).iter().map(|&l| draw_inflow(spec.family, l, &mut rng)));
            row
        })
        .collect();
    Grid::from_rows(rows)
}

/// Per-unit stay draw by inversion of the cumulative distribution.
fn draw_stay(cumulative: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1) + 1
}

/// Exits per column of `inflows` when every unit stays `l ~ π` columns.
/// Exits falling beyond the last column are dropped.
pub fn gen_outflows(inflows: &Grid<u32>, pi: &ExitRates, streams: Streams) -> Grid<u32> {
    let cumulative: Vec<f64> = pi
        .as_slice()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let n = inflows.steps();
    let rows = (0..inflows.districts())
        .into_par_iter()
        .map(|d| {
            let mut rng = streams.district(d);
            let mut out = vec![0u32; n];
            for (t, &count) in inflows.row(d).iter().enumerate() {
                for _ in 0..count {
                    let exit = t + draw_stay(&cumulative, &mut rng);
                    if exit < n {
                        out[exit] += 1;
                    }
                }
            }
            out
        })
        .collect();
    Grid::from_rows(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub beta: [f64; 3],
    /// Exit distribution over `1..=los_max`.
    pub pi: ExitRates,
    pub pre_history: usize,
    /// Pre-history then days `1..=T`.
    pub inflow: Grid<u32>,
    /// Same columns as `inflow`.
    pub outflow: Grid<u32>,
    /// Days `1..=T`.
    pub intensity: Grid<f64>,
    pub initial_occupancy: Vec<i64>,
}

impl GroundTruth {
    pub fn pi_padded(&self, max_lag: usize) -> ExitRates {
        self.pi.padded(max_lag)
    }

    /// True flows on the differenced steps (days `2..=T`) with `burn_in`
    /// days of history.
    pub fn step_flows(&self, burn_in: usize) -> LatentFlows {
        assert!(burn_in <= self.pre_history + 1, "not enough simulated history");
        let skip = self.pre_history + 1 - burn_in;
        let first_step = self.pre_history + 1;
        let inflow = Grid::from_rows(self.inflow.rows().map(|r| r[skip..].to_vec()).collect());
        let outflow = Grid::from_rows(self.outflow.rows().map(|r| r[first_step..].to_vec()).collect());
        LatentFlows::new(burn_in, inflow, outflow)
    }

    /// Intensity on the differenced steps.
    pub fn step_intensity(&self) -> Grid<f64> {
        Grid::from_rows(self.intensity.rows().map(|r| r[1..].to_vec()).collect())
    }
}

pub const COVARIATE_X1: &str = "x1";
pub const COVARIATE_X2: &str = "x2";

/// Panel and ground truth for one spec.
pub fn gen_dataset(spec: &SimSpec) -> Result<(OccupancyPanel, GroundTruth), SimError> {
    spec.validate()?;
    let cov = gen_covariates(spec);
    let intensity = inflow_intensity(spec, &cov);
    let inflow = gen_inflows(spec, &intensity);
    let pi = gen_exit_distribution(spec.los_decay, spec.los_max);
    let outflow = gen_outflows(&inflow, &pi, streams(spec, TAG_OUTFLOW));
    let pre = spec.pre_history();

    // units admitted before day 1 and still present at its start
    let initial_occupancy: Vec<i64> = (0..spec.districts)
        .map(|d| {
            let admitted: i64 = inflow.row(d)[..pre].iter().map(|&v| i64::from(v)).sum();
            let left: i64 = outflow.row(d)[..pre].iter().map(|&v| i64::from(v)).sum();
            admitted - left
        })
        .collect();
    let occupancy_rows = (0..spec.districts)
        .map(|d| {
            let mut level = initial_occupancy[d];
            (0..spec.days)
                .map(|t| {
                    level += i64::from(inflow.at(d, pre + t)) - i64::from(outflow.at(d, pre + t));
                    level
                })
                .collect()
        })
        .collect();

    let centroid_streams = streams(spec, TAG_CENTROID);
    let lon = Uniform::new(6.0, 15.0).expect("valid range");
    let lat = Uniform::new(47.5, 55.0).expect("valid range");
    let width = spec.districts.to_string().len().max(3);
    let districts = (0..spec.districts)
        .map(|d| {
            let mut rng = centroid_streams.district(d);
            District {
                id: format!("D{:0width$}", d + 1),
                population: None,
                centroid: Some(Centroid {
                    longitude: lon.sample(&mut rng),
                    latitude: lat.sample(&mut rng),
                }),
            }
        })
        .collect();
    let dates = (0..spec.days)
        .map(|t| spec.start_date + chrono::Days::new(t as u64))
        .collect();
    let x1_grid = Grid::from_rows(cov.x1.iter().map(|&x| vec![x; spec.days]).collect());
    let mut covariates = BTreeMap::new();
    covariates.insert(COVARIATE_X1.to_string(), x1_grid);
    covariates.insert(COVARIATE_X2.to_string(), cov.x2.clone());

    let panel = OccupancyPanel {
        districts,
        dates,
        occupancy: Grid::from_rows(occupancy_rows),
        covariates,
    };
    let truth = GroundTruth {
        beta: spec.beta,
        pi,
        pre_history: pre,
        inflow,
        outflow,
        intensity,
        initial_occupancy,
    };
    Ok((panel, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::compute_deltas;

    fn small() -> SimSpec {
        SimSpec {
            districts: 6,
            days: 30,
            seed: 11,
            ..SimSpec::default()
        }
    }

    #[test]
    fn exit_distribution() {
        let pi = gen_exit_distribution(0.4, 10);
        let s: f64 = pi.as_slice().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        for w in pi.as_slice().windows(2) {
            assert!((w[0] / w[1] - 0.4f64.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_day_stays() {
        let inflow = Grid::from_rows(vec![vec![3, 0, 5, 2, 7]]);
        let out = gen_outflows(&inflow, &ExitRates::uniform(1), Streams::new(1, 0, Phase::Generator));
        assert_eq!(out.row(0), &[0, 3, 0, 5, 2]);
    }

    #[test]
    fn panel_differences_match_flows() {
        let spec = small();
        let (panel, truth) = gen_dataset(&spec).unwrap();
        panel.validate().unwrap();
        let deltas = compute_deltas(&panel).unwrap();
        let flows = truth.step_flows(spec.fit_lag);
        assert_eq!(deltas.delta, flows.deltas());
        assert!(panel.occupancy.as_slice().iter().all(|&y| y >= 0));
    }

    #[test]
    fn x1_is_constant_in_time() {
        let (panel, _) = gen_dataset(&small()).unwrap();
        for row in panel.covariates[COVARIATE_X1].rows() {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn seeds_matter() {
        let a = gen_dataset(&small()).unwrap().0;
        let b = gen_dataset(&small()).unwrap().0;
        let c = gen_dataset(&SimSpec { seed: 12, ..small() }).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a.occupancy, c.occupancy);
    }
}
