//! Fixed-rank smooth bases for the inflow predictor: a cubic B-spline over
//! time with a second-difference penalty, and a low-rank thin-plate-type
//! radial basis over district centroids with a ridge penalty.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("{kind} basis needs at least {min} functions, got {got}")]
    InsufficientKnots { kind: &'static str, got: usize, min: usize },
    #[error("spatial basis requested without district centroids")]
    MissingCoordinates,
    #[error("spatial rank {rank} exceeds the {locations} available locations")]
    TooFewLocations { rank: usize, locations: usize },
    #[error("penalty weight must be finite and nonnegative, got {0}")]
    InvalidPenalty(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub longitude: f64,
    pub latitude: f64,
}

pub const TIME_LABEL: &str = "s(t)";
pub const SPACE_LABEL: &str = "s(lon,lat)";

fn one() -> f64 {
    1.0
}

/// Smooth terms of the inflow predictor. A zero size disables a term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSpec {
    /// Number of cubic B-spline functions over time (0 = off, else ≥ 4).
    pub time_knots: usize,
    #[serde(default = "one")]
    pub time_penalty: f64,
    /// Number of radial knots over space (0 = off, else ≥ 3).
    pub space_rank: usize,
    #[serde(default = "one")]
    pub space_penalty: f64,
    /// Pick penalty weights on a coarse log grid by AIC.
    pub penalty_search: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            time_knots: 0,
            time_penalty: 1.0,
            space_rank: 0,
            space_penalty: 1.0,
            penalty_search: false,
        }
    }
}

impl BasisSpec {
    pub fn time_enabled(&self) -> bool {
        self.time_knots > 0
    }

    pub fn space_enabled(&self) -> bool {
        self.space_rank > 0
    }

    pub fn validate(&self) -> Result<(), BasisError> {
        if self.time_enabled() && self.time_knots < 4 {
            return Err(BasisError::InsufficientKnots {
                kind: "time",
                got: self.time_knots,
                min: 4,
            });
        }
        if self.space_enabled() && self.space_rank < 3 {
            return Err(BasisError::InsufficientKnots {
                kind: "space",
                got: self.space_rank,
                min: 3,
            });
        }
        for w in [self.time_penalty, self.space_penalty] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(BasisError::InvalidPenalty(w));
            }
        }
        Ok(())
    }
}

/// Cubic B-spline basis with `size` functions on equally spaced knots over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicBSpline {
    pub size: usize,
    pub lo: f64,
    pub hi: f64,
}

impl CubicBSpline {
    pub fn new(size: usize, lo: f64, hi: f64) -> Result<Self, BasisError> {
        if size < 4 {
            return Err(BasisError::InsufficientKnots {
                kind: "time",
                got: size,
                min: 4,
            });
        }
        assert!(hi > lo, "degenerate spline range");
        Ok(Self { size, lo, hi })
    }

    fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.size - 3) as f64
    }

    fn knot(&self, j: usize) -> f64 {
        self.lo + (j as f64 - 3.0) * self.spacing()
    }

    /// Values of all basis functions at `x` (Cox–de Boor recursion).
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let n_knots = self.size + 4;
        // keep the right end inside the last non-empty interval
        let x = x.clamp(self.lo, self.hi - 1e-12 * (self.hi - self.lo));
        let mut b: Vec<f64> = (0..n_knots - 1)
            .map(|j| {
                if self.knot(j) <= x && x < self.knot(j + 1) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        for degree in 1..=3 {
            let mut next = vec![0.0; n_knots - 1 - degree];
            for (j, slot) in next.iter_mut().enumerate() {
                let left = {
                    let den = self.knot(j + degree) - self.knot(j);
                    if den > 0.0 {
                        (x - self.knot(j)) / den * b[j]
                    } else {
                        0.0
                    }
                };
                let right = {
                    let den = self.knot(j + degree + 1) - self.knot(j + 1);
                    if den > 0.0 {
                        (self.knot(j + degree + 1) - x) / den * b[j + 1]
                    } else {
                        0.0
                    }
                };
                *slot = left + right;
            }
            b = next;
        }
        b
    }

    /// `D₂ᵀD₂` for the second-difference operator on the coefficients.
    pub fn difference_penalty(&self) -> DMatrix<f64> {
        let k = self.size;
        let mut d = DMatrix::zeros(k - 2, k);
        for i in 0..k - 2 {
            d[(i, i)] = 1.0;
            d[(i, i + 1)] = -2.0;
            d[(i, i + 2)] = 1.0;
        }
        d.transpose() * d
    }
}

/// `r² ln r`, continuous at zero.
pub fn thin_plate_radial(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

fn distance(a: Centroid, b: Centroid) -> f64 {
    (a.longitude - b.longitude).hypot(a.latitude - b.latitude)
}

/// Greedy farthest-point sample of `k` distinct locations. Starts at the
/// location closest to the mean centroid; ties resolve to the lowest index.
pub fn farthest_point_knots(coords: &[Centroid], k: usize) -> Vec<usize> {
    if coords.is_empty() || k == 0 {
        return Vec::new();
    }
    let n = coords.len() as f64;
    let mean = Centroid {
        longitude: coords.iter().map(|c| c.longitude).sum::<f64>() / n,
        latitude: coords.iter().map(|c| c.latitude).sum::<f64>() / n,
    };
    let argbest = |score: &dyn Fn(usize) -> f64, better: fn(f64, f64) -> bool| {
        let mut best = 0;
        for i in 1..coords.len() {
            if better(score(i), score(best)) {
                best = i;
            }
        }
        best
    };
    let first = argbest(&|i| distance(coords[i], mean), |a, b| a < b);
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = coords.iter().map(|c| distance(*c, coords[first])).collect();
    while chosen.len() < k {
        let next = argbest(&|i| nearest[i], |a, b| a > b);
        if nearest[next] <= 0.0 {
            break;
        }
        chosen.push(next);
        for (i, c) in coords.iter().enumerate() {
            nearest[i] = nearest[i].min(distance(*c, coords[next]));
        }
    }
    chosen
}

/// Evaluated smooth term with its penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisBlock {
    pub label: String,
    /// One row per time step (time term) or per district (space term).
    pub values: DMatrix<f64>,
    /// True when rows index districts rather than time steps.
    pub per_district: bool,
    pub penalty: DMatrix<f64>,
    pub weight: f64,
}

fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// Uncentered time basis rows, one per entry of `times`.
pub fn time_basis_raw(times: &[f64], size: usize) -> Result<DMatrix<f64>, BasisError> {
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spline = CubicBSpline::new(size, lo, if hi > lo { hi } else { lo + 1.0 })?;
    let rows: Vec<Vec<f64>> = times.iter().map(|&t| spline.evaluate(t)).collect();
    Ok(DMatrix::from_fn(times.len(), size, |i, j| rows[i][j]))
}

/// Uncentered spatial basis rows: `K` radial columns then longitude, latitude.
pub fn space_basis_raw(coords: &[Centroid], rank: usize) -> Result<DMatrix<f64>, BasisError> {
    if rank > coords.len() {
        return Err(BasisError::TooFewLocations {
            rank,
            locations: coords.len(),
        });
    }
    let knots = farthest_point_knots(coords, rank);
    let k = knots.len();
    Ok(DMatrix::from_fn(coords.len(), k + 2, |i, j| {
        if j < k {
            thin_plate_radial(distance(coords[i], coords[knots[j]]))
        } else if j == k {
            coords[i].longitude
        } else {
            coords[i].latitude
        }
    }))
}

/// Build the smooth blocks requested by `spec`.
///
/// Columns are centered so the model intercept stays identified. The time
/// block additionally drops its last column, since a centered B-spline
/// basis still sums to zero across columns.
pub fn build_basis(times: &[f64], coords: Option<&[Centroid]>, spec: &BasisSpec) -> Result<Vec<BasisBlock>, BasisError> {
    spec.validate()?;
    let mut blocks = Vec::new();
    if spec.time_enabled() {
        let mut values = time_basis_raw(times, spec.time_knots)?;
        center_columns(&mut values);
        let k = spec.time_knots - 1;
        let values = values.columns(0, k).into_owned();
        let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let full = CubicBSpline::new(spec.time_knots, lo, hi.max(lo + 1.0))?.difference_penalty();
        blocks.push(BasisBlock {
            label: TIME_LABEL.into(),
            values,
            per_district: false,
            penalty: full.view((0, 0), (k, k)).into_owned(),
            weight: spec.time_penalty,
        });
    }
    if spec.space_enabled() {
        let coords = coords.ok_or(BasisError::MissingCoordinates)?;
        let mut values = space_basis_raw(coords, spec.space_rank)?;
        center_columns(&mut values);
        let p = values.ncols();
        let radial = p - 2;
        let penalty = DMatrix::from_fn(p, p, |i, j| if i == j && i < radial { 1.0 } else { 0.0 });
        blocks.push(BasisBlock {
            label: SPACE_LABEL.into(),
            values,
            per_district: true,
            penalty,
            weight: spec.space_penalty,
        });
    }
    Ok(blocks)
}
