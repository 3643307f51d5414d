//! Independent reference computations shared by the oracle tests and the
//! acceptance report.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

use occuflow::exit_rate::{partial_loglik, qp_solve, score_fisher, QpProblem};
use occuflow::inference::rubin_variance;
use occuflow::skellam::{conditional_pmf, sample_conditional_with, skellam_pmf, truncated_joint_pmf, SkellamParams};
use occuflow::{ExitRates, Grid, LatentFlows};

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn poisson_ln(k: i64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * lambda.ln() - lambda - ln_gamma(k as f64 + 1.0)
}

/// `Σ_i Pois(i; λI) Pois(i − δ; λR)` summed term by term.
pub fn skellam_brute(delta: i64, lambda_in: f64, lambda_out: f64) -> f64 {
    let start = delta.max(0);
    (start..start + 600)
        .map(|i| (poisson_ln(i, lambda_in) + poisson_ln(i - delta, lambda_out)).exp())
        .sum()
}

pub fn oracle_skellam() -> Check {
    for &li in &[0.5, 1.0, 5.0, 20.0] {
        for &lr in &[0.5, 1.0, 5.0, 20.0] {
            let p = SkellamParams::new(li, lr).unwrap();
            for delta in -20..=20 {
                let got = skellam_pmf(delta, p);
                let want = skellam_brute(delta, li, lr);
                if (got - want).abs() > 1e-10 {
                    return Err(format!("pmf({delta}; {li}, {lr}) = {got}, convolution gives {want}"));
                }
            }
        }
    }
    Ok(())
}

pub fn oracle_truncated(cells: usize) -> Check {
    let mut r = rng(17);
    for cell in 0..cells {
        let li = r.random_range(0.01..40.0);
        let lr = r.random_range(0.01..40.0);
        let delta = r.random_range(-30i64..=30);
        let p = SkellamParams::new(li, lr).unwrap();
        let pmf = conditional_pmf(delta, p, 1e-10);
        let total: f64 = pmf.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(format!("cell {cell}: conditional pmf sums to {total}"));
        }
        let i_max = pmf.i_max + r.random_range(0..5);
        let trunc = truncated_joint_pmf(delta, p, i_max).map_err(|e| e.to_string())?;
        let total: f64 = trunc.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(format!("cell {cell}: truncated pmf sums to {total}"));
        }
        if trunc.probs.iter().any(|&q| q < 0.0) {
            return Err(format!("cell {cell}: negative probability"));
        }
        let (i, o) = sample_conditional_with(delta, p, 1e-10, &mut r);
        if i64::from(i) - i64::from(o) != delta {
            return Err(format!("cell {cell}: draw ({i}, {o}) violates I − R = {delta}"));
        }
    }
    Ok(())
}

/// Random flows with strictly positive inflows so every rate is positive.
pub fn random_flows(r: &mut ChaCha8Rng, districts: usize, steps: usize, burn_in: usize) -> LatentFlows {
    let inflow: Vec<Vec<u32>> = (0..districts)
        .map(|_| (0..burn_in + steps).map(|_| r.random_range(1..25)).collect())
        .collect();
    let outflow: Vec<Vec<u32>> = (0..districts)
        .map(|_| (0..steps).map(|_| r.random_range(0..25)).collect())
        .collect();
    LatentFlows::new(burn_in, Grid::from_rows(inflow), Grid::from_rows(outflow))
}

pub fn interior_rates(r: &mut ChaCha8Rng, lags: usize) -> ExitRates {
    ExitRates::normalized((0..lags).map(|_| r.random_range(0.3..1.0)).collect()).unwrap()
}

fn loglik_free(x: &[f64], flows: &LatentFlows) -> f64 {
    partial_loglik(&ExitRates::from_free(x).unwrap(), flows).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn oracle_score_fisher(instances: usize) -> Check {
    let mut r = rng(23);
    for k in 0..instances {
        let lags = r.random_range(2..=5);
        let (d, t) = (r.random_range(1..=3), r.random_range(5..=15));
        let flows = random_flows(&mut r, d, t, lags);
        let omega = interior_rates(&mut r, lags);
        let problem = score_fisher(&omega, &flows).map_err(|e| e.to_string())?;
        let x0 = omega.free().to_vec();
        let n = x0.len();

        let h = 1e-6;
        let fd_grad: Vec<f64> = (0..n)
            .map(|j| {
                let mut up = x0.clone();
                let mut dn = x0.clone();
                up[j] += h;
                dn[j] -= h;
                (loglik_free(&up, &flows) - loglik_free(&dn, &flows)) / (2.0 * h)
            })
            .collect();
        let e = rel_err(problem.gradient.as_slice(), &fd_grad);
        if e > 1e-5 {
            return Err(format!("instance {k}: score relative error {e:.2e}"));
        }

        let h = 1e-4;
        let mut fd_info = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let eval = |sa: f64, sb: f64| {
                    let mut x = x0.clone();
                    x[a] += sa;
                    x[b] += sb;
                    loglik_free(&x, &flows)
                };
                let second = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
                fd_info[a * n + b] = -second;
            }
        }
        let info: Vec<f64> = (0..n * n).map(|i| problem.hessian[(i / n, i % n)]).collect();
        let e = rel_err(&info, &fd_info);
        if e > 1e-4 {
            return Err(format!("instance {k}: information relative error {e:.2e}"));
        }
    }
    Ok(())
}

fn quad_objective(h: &DMatrix<f64>, g: &DVector<f64>, c: &DVector<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let d: Vec<f64> = (0..n).map(|i| x[i] - c[i]).collect();
    let mut lin = 0.0;
    let mut quad = 0.0;
    for i in 0..n {
        lin += g[i] * d[i];
        for j in 0..n {
            quad += d[i] * h[(i, j)] * d[j];
        }
    }
    lin - 0.5 * quad
}

/// Best objective over `{x ≥ 0, Σx ≤ 1}` on the lattice of step `1/steps`.
/// The last coordinate is searched exactly along its lattice line: the
/// objective is concave in it, so the best lattice point is next to the
/// clipped continuous maximizer.
pub fn grid_maximum_3d(h: &DMatrix<f64>, g: &DVector<f64>, c: &DVector<f64>, steps: i64) -> f64 {
    let s = steps as f64;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let x0 = i as f64 / s;
            let x1 = j as f64 / s;
            let room = steps - i - j;
            let cont = c[2] + (g[2] - h[(2, 0)] * (x0 - c[0]) - h[(2, 1)] * (x1 - c[1])) / h[(2, 2)];
            let k0 = ((cont * s).floor() as i64).clamp(0, room);
            for k in [k0, (k0 + 1).min(room)] {
                let v = quad_objective(h, g, c, &[x0, x1, k as f64 / s]);
                best = best.max(v);
            }
        }
    }
    best
}

pub fn random_qp(r: &mut ChaCha8Rng, n: usize) -> QpProblem {
    let a = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    let hessian = a.transpose() * &a + DMatrix::identity(n, n) * 0.05;
    let gradient = DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
    let raw: Vec<f64> = (0..=n).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let center = DVector::from_fn(n, |i, _| raw[i] / total);
    QpProblem { hessian, gradient, center }
}

pub fn oracle_qp_grid(instances: usize) -> Check {
    let mut r = rng(29);
    for k in 0..instances {
        let problem = random_qp(&mut r, 3);
        let sol = qp_solve(&problem).map_err(|e| e.to_string())?;
        let x = sol.x.as_slice();
        if x.iter().any(|&v| v < -1e-9) || x.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(format!("problem {k}: infeasible solution {x:?}"));
        }
        let got = quad_objective(&problem.hessian, &problem.gradient, &problem.center, x);
        let grid = grid_maximum_3d(&problem.hessian, &problem.gradient, &problem.center, 1000);
        if (got - grid).abs() > 1e-5 {
            return Err(format!("problem {k}: qp objective {got}, grid search {grid}"));
        }
    }
    Ok(())
}

/// Within plus between covariance, written out with plain loops.
pub fn rubin_two_pass(betas: &[Vec<f64>], covs: &[Vec<f64>], p: usize, window: (usize, usize)) -> Vec<f64> {
    let (start, end) = window;
    let n = (end - start) as f64;
    let mut within = vec![0.0; p * p];
    for c in &covs[start..end] {
        for i in 0..p * p {
            within[i] += c[i];
        }
    }
    for v in within.iter_mut() {
        *v /= n;
    }
    let mut mean = vec![0.0; p];
    for b in &betas[start..end] {
        for i in 0..p {
            mean[i] += b[i];
        }
    }
    for v in mean.iter_mut() {
        *v /= n;
    }
    let mut between = vec![0.0; p * p];
    for b in &betas[start..end] {
        let d: Vec<f64> = (0..p).map(|i| b[i] - mean[i]).collect();
        for i in 0..p {
            for j in 0..p {
                between[i * p + j] += d[i] * d[j];
            }
        }
    }
    for v in between.iter_mut() {
        *v /= n - 1.0;
    }
    (0..p * p).map(|i| within[i] + between[i]).collect()
}

pub fn random_chain(r: &mut ChaCha8Rng, len: usize, p: usize) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let betas = (0..len).map(|_| DVector::from_fn(p, |_, _| r.random_range(-3.0..3.0))).collect();
    let covs = (0..len)
        .map(|_| {
            let a = DMatrix::from_fn(p, p, |_, _| r.random_range(-1.0..1.0));
            &a * a.transpose()
        })
        .collect();
    (betas, covs)
}

pub fn oracle_rubin(chains: usize) -> Check {
    let mut r = rng(31);
    for k in 0..chains {
        let p = r.random_range(1..=6);
        let len = r.random_range(3..=40);
        let (betas, covs) = random_chain(&mut r, len, p);
        let start = r.random_range(0..len - 2);
        let end = r.random_range(start + 2..=len);
        let got = rubin_variance(&betas, &covs, (start, end)).map_err(|e| e.to_string())?;
        // nalgebra stores column-major; the reference is row-major
        let b: Vec<Vec<f64>> = betas.iter().map(|v| v.as_slice().to_vec()).collect();
        let c: Vec<Vec<f64>> = covs.iter().map(|m| m.transpose().as_slice().to_vec()).collect();
        let want = rubin_two_pass(&b, &c, p, (start, end));
        for i in 0..p {
            for j in 0..p {
                if got[(i, j)] != want[i * p + j] {
                    return Err(format!(
                        "chain {k}: entry ({i},{j}) is {} against {}",
                        got[(i, j)],
                        want[i * p + j]
                    ));
                }
            }
        }
    }
    Ok(())
}
