//! Recover latent inflows, outflows and the length-of-stay distribution of a
//! queue-like system from its observed net occupancy.
//!
//! The daily change in occupancy `Δ = I − R` is modelled as the difference of
//! two conditionally independent Poisson counts (a Skellam variable). Inflows
//! follow a penalized log-linear model, outflows are driven by recent inflows
//! through an exit-rate vector `ω` on the probability simplex. Both latent
//! series are imputed by a stochastic EM chain, with an optional correction
//! that undoes the pull of `ω̂` towards the discrete uniform distribution.
//!
//! Module map:
//!
//! * [`panel`]: occupancy panels, differencing, design matrices, regional aggregation.
//! * [`skellam`]: Skellam probabilities and conditional `(I, R)` sampling.
//! * [`glm`]: penalized Poisson IRLS and spline bases for the inflow intensity.
//! * [`exit_rate`]: simplex-constrained exit-rate estimation by sequential QP.
//! * [`sem`]: the stochastic EM driver and its trace.
//! * [`correction`]: the shrinkage estimate `ĉ` and the exit-rate un-shrinking.
//! * [`inference`]: chain summaries and the within/between variance combination.
//! * [`sim`]: synthetic panels with known ground truth.
//! * [`cli`]: the `occuflow` command implementations.

pub mod cli;
pub mod config;
pub mod correction;
pub mod exit_rate;
pub mod glm;
pub mod grid;
pub mod inference;
pub mod output;
pub mod panel;
pub mod rng;
pub mod sem;
pub mod sim;
pub mod skellam;

pub use exit_rate::ExitRates;
pub use grid::Grid;
pub use panel::{DeltaSeries, DesignMatrix, OccupancyPanel, RegionMap};
pub use sem::{LatentFlows, SemConfig, SemTrace};
