//! Dense strictly convex QP by the Goldfarb–Idnani dual active-set method.
//!
//! Solves `min ½ xᵀGx + aᵀx  s.t.  cᵢᵀx ≥ bᵢ`. Starting from the
//! unconstrained minimizer, the most violated constraint is added each outer
//! step; partial steps drop constraints whose multipliers would turn
//! negative. The active-set factorization `L⁻¹N = Q₁R` is recomputed per
//! step, which is cheap at the sizes used here (tens of variables).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("numerical failure: {0}")]
    NumericalFailure(&'static str),
    #[error("active-set iteration limit reached")]
    CycleLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub x: DVector<f64>,
    /// Indices of active constraints, with their multipliers.
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

/// Cholesky factor of `g`, adding a growing ridge if `g` is only semidefinite.
pub(crate) fn regularized_cholesky(g: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, QpError> {
    if let Some(c) = g.clone().cholesky() {
        return Ok(c);
    }
    let scale = g.diagonal().amax().max(1.0);
    let mut ridge = 1e-12 * scale;
    for _ in 0..12 {
        let shifted = g + DMatrix::identity(g.nrows(), g.ncols()) * ridge;
        if let Some(c) = shifted.cholesky() {
            return Ok(c);
        }
        ridge *= 100.0;
    }
    Err(QpError::NumericalFailure("hessian is not positive semidefinite"))
}

fn solve_upper(r: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, QpError> {
    r.solve_upper_triangular(rhs)
        .ok_or(QpError::NumericalFailure("dependent active constraints"))
}

pub fn solve_dual(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    constraints: &[DVector<f64>],
    bounds: &[f64],
    max_iter: usize,
) -> Result<DualSolution, QpError> {
    let n = a.len();
    let chol = regularized_cholesky(g)?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NumericalFailure("singular factor"))?;
    let mut x = chol.solve(&(-a));
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;

    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(QpError::CycleLimit);
        }
        let mut worst: Option<(usize, f64)> = None;
        for (i, c) in constraints.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let slack = c.dot(&x) - bounds[i];
            let tol = 1e-12 * (1.0 + bounds[i].abs());
            if slack < -tol && worst.is_none_or(|(_, s)| slack < s) {
                worst = Some((i, slack));
            }
        }
        let Some((p, _)) = worst else {
            return Ok(DualSolution {
                x,
                active,
                multipliers: u,
                iterations,
            });
        };
        let cp = &constraints[p];
        let mut u_plus = u.clone();
        u_plus.push(0.0);

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::CycleLimit);
            }
            let q = active.len();
            let w = &l_inv * cp;
            let (z, r) = if q == 0 {
                (l_inv.tr_mul(&w), DVector::zeros(0))
            } else {
                let nmat = DMatrix::from_columns(&active.iter().map(|&i| constraints[i].clone()).collect::<Vec<_>>());
                let qr = (&l_inv * nmat).qr();
                let q1 = qr.q();
                let rmat = qr.r();
                let d1 = q1.tr_mul(&w);
                let z = l_inv.tr_mul(&(&w - &q1 * &d1));
                (z, solve_upper(&rmat, &d1)?)
            };

            // largest dual step keeping the active multipliers nonnegative
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for j in 0..q {
                if r[j] > 1e-14 {
                    let ratio = u_plus[j] / r[j];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(j);
                    }
                }
            }
            let zc = z.dot(cp);
            let t2 = if zc > 1e-12 * w.norm_squared().max(f64::MIN_POSITIVE) {
                -(cp.dot(&x) - bounds[p]) / zc
            } else {
                f64::INFINITY
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpError::Infeasible);
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                x += &z * t;
            }
            for j in 0..q {
                u_plus[j] -= t * r[j];
            }
            u_plus[q] += t;
            if t2 <= t1 {
                active.push(p);
                u = u_plus;
                break;
            }
            let k = drop.expect("partial step implies a blocking multiplier");
            active.remove(k);
            u_plus.remove(k);
        }
    }
}

/// Euclidean projection onto `{x ≥ 0, Σx ≤ 1}`.
pub fn project_capped_simplex(v: &DVector<f64>) -> DVector<f64> {
    let clipped = v.map(|x| x.max(0.0));
    if clipped.sum() <= 1.0 {
        return clipped;
    }
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        cum += s;
        let candidate = (cum - 1.0) / (k + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// Projected gradient on `{x ≥ 0, Σx ≤ 1}` for `min ½ xᵀGx + aᵀx`.
pub fn projected_gradient(g: &DMatrix<f64>, a: &DVector<f64>, start: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let lipschitz = g.norm().max(1e-12);
    let mut x = project_capped_simplex(start);
    for _ in 0..max_iter {
        let grad = g * &x + a;
        let next = project_capped_simplex(&(&x - grad / lipschitz));
        let change = (&next - &x).amax();
        x = next;
        if change < 1e-14 {
            break;
        }
    }
    x
}
