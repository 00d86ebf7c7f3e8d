//! Sparse stochastic variational inference for the multi-task ordinal GP.

mod adam;
mod objective;
mod params;
mod predict;
mod state;
mod train;

pub use adam::Adam;
pub use objective::{Gradients, Objective, MIN_VARIANCE};
pub use params::{FreeParams, ModelParams, ModelState};
pub use predict::{
    inducing_covariance, marginal_q_f, predict_responses, MarginalPrediction, Query,
};
pub use state::{kl_gaussian, place_inducing, VariationalState};
pub use train::{fit, pack, pack_gradient, unpack, FitOutput, TrainConfig};

use crate::error::Result;
use crate::ordinal::{Link, OrdinalThresholds};
use crate::quadrature::GaussHermite;

/// `E_{f ~ N(mean, variance)}[log p(level | f)]` by Gauss-Hermite quadrature
/// of the given order.
pub fn gauss_hermite_expectation(
    mean: f64,
    variance: f64,
    level: usize,
    thresholds: &OrdinalThresholds,
    link: Link,
    order: usize,
) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(crate::Error::Domain(format!(
            "variance must be positive, got {variance}"
        )));
    }
    let rule = GaussHermite::new(order)?;
    crate::ordinal::ordinal_log_prob(level, mean, thresholds, link)?;
    Ok(rule.expect(mean, variance, |f| {
        crate::ordinal::ordinal_log_prob_grad(level, f, thresholds, link).value
    }))
}
