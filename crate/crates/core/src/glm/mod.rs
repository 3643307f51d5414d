//! Penalized Poisson regression with log link for the inflow intensity.

pub mod basis;
mod irls;

pub use irls::{
    fit_poisson, fit_poisson_with, linear_predictor, poisson_loglik, predict_intensity, select_penalty_weights,
    GlmError, InflowFit, IrlsOptions,
};
