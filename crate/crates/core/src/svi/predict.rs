use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{CoregionalKernel, TaskTimeInput, TimeKernel};
use crate::linalg::{cholesky_jittered, solve_lower};
use crate::ordinal::ordinal_probs;
use crate::quadrature::GaussHermite;

use super::objective::MIN_VARIANCE;
use super::params::ModelState;
use super::state::VariationalState;

/// Marginals of `q(f) = ∫ p(f | u) q(u) du` at a set of inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Predictive marginals for a unit whose whitened posterior is `state`.
pub fn marginal_q_f<K: TimeKernel>(
    state: &VariationalState,
    kernel: &CoregionalKernel<K>,
    queries: &[TaskTimeInput],
) -> Result<MarginalPrediction> {
    let z = state.inducing();
    let (l, _) = cholesky_jittered(&kernel.cross(z, z))?;
    let a = solve_lower(&l, &kernel.cross(z, queries));
    let b = state.cov_factor().tr_mul(&a);
    let mean = a.tr_mul(state.mean()).iter().copied().collect();
    let variance = queries
        .iter()
        .enumerate()
        .map(|(n, q)| {
            (kernel.eval(q, q) - a.column(n).norm_squared() + b.column(n).norm_squared())
                .max(MIN_VARIANCE)
        })
        .collect();
    Ok(MarginalPrediction { mean, variance })
}

/// A prediction request for one (unit, item, time) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub unit: usize,
    pub item: usize,
    pub time: f64,
}

/// Predictive categorical distribution per query, marginalizing the ordinal
/// likelihood over `q(f*)` with Gauss-Hermite quadrature.
pub fn predict_responses(
    model: &ModelState,
    quadrature: &GaussHermite,
    queries: &[Query],
) -> Result<Vec<Vec<f64>>> {
    model.validate()?;
    let params = &model.params;
    let thresholds = params.thresholds();
    let mut out = vec![Vec::new(); queries.len()];
    let mut by_unit: Vec<Vec<usize>> = vec![Vec::new(); params.num_units()];
    for (k, q) in queries.iter().enumerate() {
        if q.unit >= params.num_units() {
            return Err(Error::Data(format!(
                "unknown unit index {} (model has {})",
                q.unit,
                params.num_units()
            )));
        }
        if q.item >= params.num_items() {
            return Err(Error::Data(format!(
                "unknown item index {} (model has {})",
                q.item,
                params.num_items()
            )));
        }
        by_unit[q.unit].push(k);
    }
    for (unit, idx) in by_unit.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let kernel = CoregionalKernel::new(params.task_kernel(unit), params.time_kernel(unit)?)?;
        let inputs: Vec<TaskTimeInput> = idx
            .iter()
            .map(|&k| TaskTimeInput {
                item: queries[k].item,
                time: queries[k].time,
            })
            .collect();
        let marg = marginal_q_f(&model.variational[unit], &kernel, &inputs)?;
        for (pos, &k) in idx.iter().enumerate() {
            let mut probs = vec![0.0; thresholds.num_levels()];
            for (f, w, _) in quadrature.points(marg.mean[pos], marg.variance[pos]) {
                for (acc, p) in probs
                    .iter_mut()
                    .zip(ordinal_probs(f, &thresholds, model.link))
                {
                    *acc += w * p;
                }
            }
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= total);
            out[k] = probs;
        }
    }
    Ok(out)
}

/// Dense `K_uu` of a unit, without jitter.
pub fn inducing_covariance<K: TimeKernel>(
    state: &VariationalState,
    kernel: &CoregionalKernel<K>,
) -> DMatrix<f64> {
    kernel.cross(state.inducing(), state.inducing())
}
