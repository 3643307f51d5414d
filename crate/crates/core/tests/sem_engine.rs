mod common;

use nalgebra::DVector;

use occuflow::correction::{
    corrected_iteration, estimate_c, inner_em_refit, simulate_unconditional, CorrectionMode,
};
use occuflow::exit_rate::{fit_exit_rates, ExitRateOptions};
use occuflow::glm::InflowFit;
use occuflow::inference::median;
use occuflow::panel::{build_covariates, compute_deltas, CovariateConfig};
use occuflow::rng::{Phase, Streams};
use occuflow::sem::{burn_in_inflows, e_step, first_step, run_sem_from, SemConfig};
use occuflow::sim::{gen_dataset, SimSpec};
use occuflow::{ExitRates, Grid};

fn desk(seed: u64) -> SimSpec {
    SimSpec { districts: 50, days: 100, seed, ..SimSpec::default() }
}

fn raw_covariates() -> CovariateConfig {
    CovariateConfig { raw: vec!["x1".into(), "x2".into()], ..CovariateConfig::default() }
}

#[test]
fn burn_in_moments_and_shape() {
    let prefix = burn_in_inflows(&vec![3.0; 1000], 10, Streams::new(1, 1, Phase::BurnIn));
    assert_eq!(prefix.steps(), 10);
    let n = prefix.as_slice().len() as f64;
    let mean = prefix.as_slice().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    assert!((mean - 3.0).abs() < 3.0 / n.sqrt() * 3.0, "mean {mean}");
    assert_eq!(burn_in_inflows(&[1.0, 2.0], 12, Streams::new(1, 1, Phase::BurnIn)).steps(), 12);
}

#[test]
fn districts_are_drawn_independently() {
    let mut r = common::rng(2);
    use rand::Rng;
    let (steps, lags) = (30, 5);
    let deltas = Grid::from_rows((0..3).map(|_| (0..steps).map(|_| r.random_range(-4i64..=4)).collect()).collect());
    let intensity = Grid::from_rows((0..3).map(|_| (0..steps).map(|_| r.random_range(1.0..8.0)).collect()).collect());
    let omega = common::interior_rates(&mut r, lags);
    let burn = Grid::from_rows((0..3).map(|_| vec![2; lags]).collect());
    let s = Streams::new(4, 1, Phase::EStep);
    let a = e_step(&deltas, &intensity, &omega, &burn, s, 1e-10);
    let mut other = deltas.clone();
    for t in 0..steps {
        other.set(1, t, deltas.at(1, t) + 2);
    }
    let b = e_step(&other, &intensity, &omega, &burn, s, 1e-10);
    for d in [0, 2] {
        assert_eq!(a.inflow_row(d), b.inflow_row(d));
        assert_eq!(a.outflow_row(d), b.outflow_row(d));
    }
}

#[test]
fn inflow_response_excludes_burn_in() {
    let spec = SimSpec { districts: 6, days: 25, seed: 3, ..SimSpec::default() };
    let (panel, truth) = gen_dataset(&spec).unwrap();
    let design = build_covariates(&panel, &raw_covariates()).unwrap();
    let flows = truth.step_flows(12);
    let y = flows.inflow_response();
    assert_eq!(y.len(), design.nrows());
    for (row, &(t, d)) in design.row_index.iter().enumerate() {
        assert!(t < design.n_steps);
        assert_eq!(y[row], f64::from(flows.inflow(d, t as isize)));
    }
}

#[test]
fn oracle_flows_give_unit_shrinkage() {
    let cs: Vec<f64> = (0..20)
        .map(|k| {
            let spec = desk(100 + k);
            let (_, truth) = gen_dataset(&spec).unwrap();
            let flows = truth.step_flows(spec.fit_lag);
            let reference = truth.pi_padded(spec.fit_lag);
            let fit = fit_exit_rates(&flows, spec.fit_lag, &ExitRates::uniform(spec.fit_lag)).unwrap();
            estimate_c(&reference, &fit.omega).unwrap()
        })
        .collect();
    let m = median(&cs);
    assert!((0.8..=1.25).contains(&m), "median ĉ {m}");
}

#[test]
fn steady_state_differences_average_zero() {
    let intensity = Grid::from_vec(40, 500, vec![5.0; 40 * 500]);
    let omega = ExitRates::new(vec![0.5, 0.3, 0.2]).unwrap();
    let sim = simulate_unconditional(&intensity, &omega, Streams::new(5, 1, Phase::Simulate));
    let d: Vec<f64> = sim.deltas.as_slice().iter().map(|&v| v as f64).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // neighbouring differences are correlated; allow a generous multiple
    assert!(mean.abs() < 5.0 * (var / n).sqrt(), "mean {mean}");
    for dd in 0..40 {
        for t in 0..500 {
            let i = i64::from(sim.flows.inflow(dd, t as isize));
            let r = i64::from(sim.flows.outflow(dd, t));
            assert_eq!(i - r, sim.deltas.at(dd, t));
        }
    }
}

#[test]
fn uniform_rates_are_a_fixed_point() {
    let spec = desk(6);
    let (_, truth) = gen_dataset(&spec).unwrap();
    let intensity = truth.step_intensity();
    let omega = ExitRates::uniform(12);
    let sim = simulate_unconditional(&intensity, &omega, Streams::new(6, 1, Phase::Simulate));
    let refit = inner_em_refit(
        &sim.deltas,
        &intensity,
        &omega,
        Streams::new(6, 1, Phase::InnerBurnIn),
        Streams::new(6, 1, Phase::InnerEStep),
        1e-10,
        ExitRateOptions::default(),
    )
    .unwrap();
    assert!(refit.omega.max_abs_diff(omega.as_slice()) < 0.05, "{:?}", refit.omega);
}

#[test]
fn closed_system_refit_is_flat() {
    let intensity = Grid::from_vec(3, 20, vec![1e-13; 60]);
    let omega = ExitRates::new(vec![0.6, 0.3, 0.1]).unwrap();
    let sim = simulate_unconditional(&intensity, &omega, Streams::new(1, 1, Phase::Simulate));
    assert!(sim.deltas.as_slice().iter().all(|&d| d == 0));
    let refit = inner_em_refit(
        &sim.deltas,
        &intensity,
        &omega,
        Streams::new(1, 1, Phase::InnerBurnIn),
        Streams::new(1, 1, Phase::InnerEStep),
        1e-10,
        ExitRateOptions::default(),
    )
    .unwrap();
    assert!(refit.flat);
    assert_eq!(refit.omega, omega);
}

fn small_problem(seed: u64) -> (occuflow::DeltaSeries, occuflow::DesignMatrix, InflowFit, ExitRates) {
    let spec = SimSpec { districts: 10, days: 40, seed, ..SimSpec::default() };
    let (panel, truth) = gen_dataset(&spec).unwrap();
    let deltas = compute_deltas(&panel).unwrap();
    let design = build_covariates(&panel, &raw_covariates()).unwrap();
    let fit = InflowFit::from_coefficients(design.names.clone(), DVector::from_column_slice(&spec.beta));
    (deltas, design, fit, truth.pi_padded(12))
}

#[test]
fn corrected_iteration_keeps_constraint_and_is_deterministic() {
    let (deltas, design, fit, omega) = small_problem(7);
    let config = SemConfig { seed: 7, ..SemConfig::default() };
    let a = corrected_iteration(&deltas.delta, &design, &fit, &omega, &config, 3).unwrap();
    assert_eq!(a.flows.deltas(), deltas.delta);
    let sum: f64 = a.estimate.omega_corrected.as_slice().iter().sum();
    assert!((sum - 1.0).abs() < 1e-10 && a.estimate.c_hat >= 0.0);
    let b = corrected_iteration(&deltas.delta, &design, &fit, &omega, &config, 3).unwrap();
    assert_eq!(a.estimate, b.estimate);
    assert_eq!(a.fit.coefficients, b.fit.coefficients);
}

#[test]
fn disabled_correction_passes_rates_through() {
    let (deltas, design, fit, omega) = small_problem(8);
    let config = SemConfig { seed: 8, correction: CorrectionMode::Off, ..SemConfig::default() };
    let out = corrected_iteration(&deltas.delta, &design, &fit, &omega, &config, 1).unwrap();
    assert!(out.estimate.omega_corrected.max_abs_diff(omega.as_slice()) < 1e-15);
}

#[test]
fn chain_started_at_truth_stays_near_truth() {
    let spec = desk(9);
    let (panel, truth) = gen_dataset(&spec).unwrap();
    let deltas = compute_deltas(&panel).unwrap();
    let design = build_covariates(&panel, &raw_covariates()).unwrap();
    let config = SemConfig {
        seed: 9,
        iterations_pre: 1,
        iterations_corrected: 9,
        summary_window: 9,
        ..SemConfig::default()
    };
    let start = InflowFit::from_coefficients(design.names.clone(), DVector::from_column_slice(&spec.beta));
    let run = run_sem_from(&deltas, &design, &config, start, truth.pi_padded(12)).unwrap();
    assert_eq!(run.trace.completed(), 10);
    assert!(run.trace.records.iter().all(|r| r.loglik.is_finite()));
    let beta = &run.trace.last().unwrap().beta;
    assert!((beta[0] - 0.5).abs() < 0.25, "{beta:?}");
    assert!((beta[1] - 1.0).abs() < 0.15, "{beta:?}");
    assert!((beta[2] - 0.2).abs() < 0.15, "{beta:?}");
    let omega = &run.omega;
    assert!(omega.max_abs_diff(truth.pi_padded(12).as_slice()) < 0.1, "{omega:?}");
}

#[test]
fn same_seed_same_trace() {
    let (deltas, design, fit, omega) = small_problem(10);
    let config = SemConfig {
        seed: 10,
        iterations_pre: 3,
        iterations_corrected: 2,
        summary_window: 2,
        ..SemConfig::default()
    };
    let a = run_sem_from(&deltas, &design, &config, fit.clone(), omega.clone()).unwrap();
    let b = run_sem_from(&deltas, &design, &config, fit, omega).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(first_step(&Grid::from_vec(1, 2, vec![1.5, 2.0])), vec![1.5]);
}
