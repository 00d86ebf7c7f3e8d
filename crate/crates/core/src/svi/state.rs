use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::TaskTimeInput;
use crate::linalg::{log_det_from_factor, solve_lower};

/// Gaussian `q(u)` over the inducing values of one unit.
///
/// Stored in whitened coordinates: with `K_uu = L_uu L_uu^T`, `u = L_uu v`
/// and `q(v) = N(mean, L L^T)` where `L = cov_factor`. The prior on `v` is
/// standard normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    inducing: Vec<TaskTimeInput>,
    mean: DVector<f64>,
    cov_factor: DMatrix<f64>,
}

impl VariationalState {
    pub fn new(
        inducing: Vec<TaskTimeInput>,
        mean: DVector<f64>,
        cov_factor: DMatrix<f64>,
    ) -> Result<Self> {
        let m = inducing.len();
        if m == 0 {
            return Err(Error::Structural(
                "at least one inducing input is required".into(),
            ));
        }
        if mean.len() != m || cov_factor.nrows() != m || cov_factor.ncols() != m {
            return Err(Error::Structural(format!(
                "variational mean has {} entries and factor is {}x{} for {m} inducing inputs",
                mean.len(),
                cov_factor.nrows(),
                cov_factor.ncols()
            )));
        }
        for a in 0..m {
            if !(cov_factor[(a, a)] > 0.0) {
                return Err(Error::Domain(format!(
                    "covariance factor diagonal {a} is {}",
                    cov_factor[(a, a)]
                )));
            }
            for b in (a + 1)..m {
                if cov_factor[(a, b)] != 0.0 {
                    return Err(Error::Structural(
                        "covariance factor must be lower triangular".into(),
                    ));
                }
            }
        }
        for (a, za) in inducing.iter().enumerate() {
            if inducing[..a]
                .iter()
                .any(|zb| zb.item == za.item && zb.time == za.time)
            {
                return Err(Error::Structural(format!(
                    "duplicate inducing input (item {}, time {})",
                    za.item, za.time
                )));
            }
        }
        Ok(Self {
            inducing,
            mean,
            cov_factor,
        })
    }

    /// Zero mean, `L = scale * I`.
    pub fn init(inducing: Vec<TaskTimeInput>, scale: f64) -> Result<Self> {
        let m = inducing.len();
        Self::new(inducing, DVector::zeros(m), DMatrix::identity(m, m) * scale)
    }

    /// Whitens an explicit `N(mu, sigma)` over `u` given the lower factor of
    /// the inducing prior covariance.
    pub fn from_unwhitened(
        inducing: Vec<TaskTimeInput>,
        mu: &DVector<f64>,
        sigma: &DMatrix<f64>,
        prior_factor: &DMatrix<f64>,
    ) -> Result<Self> {
        let mean = solve_lower(
            prior_factor,
            &DMatrix::from_column_slice(mu.len(), 1, mu.as_slice()),
        )
        .column(0)
        .into_owned();
        let half = solve_lower(prior_factor, sigma);
        let whitened = solve_lower(prior_factor, &half.transpose());
        let sym = (&whitened + whitened.transpose()) * 0.5;
        let cov_factor = sym
            .cholesky()
            .ok_or_else(|| Error::Numerical("whitened covariance is not positive definite".into()))?
            .unpack();
        Self::new(inducing, mean, cov_factor)
    }

    pub fn inducing(&self) -> &[TaskTimeInput] {
        &self.inducing
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov_factor(&self) -> &DMatrix<f64> {
        &self.cov_factor
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub(crate) fn mean_mut(&mut self) -> &mut DVector<f64> {
        &mut self.mean
    }

    pub(crate) fn cov_factor_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.cov_factor
    }

    /// `KL(q(v) || N(0, I))`.
    pub fn kl_whitened(&self) -> f64 {
        let m = self.mean.len() as f64;
        0.5 * (self.cov_factor.norm_squared() + self.mean.norm_squared()
            - m
            - log_det_from_factor(&self.cov_factor))
    }
}

/// `KL(N(mean, L L^T) || N(0, prior_cov))` in closed form.
pub fn kl_gaussian(
    mean: &DVector<f64>,
    cov_factor: &DMatrix<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<f64> {
    let m = mean.len();
    if cov_factor.shape() != (m, m) || prior_cov.shape() != (m, m) {
        return Err(Error::Structural(
            "KL arguments have inconsistent sizes".into(),
        ));
    }
    if (0..m).any(|a| !(cov_factor[(a, a)] > 0.0)) {
        return Err(Error::Numerical(
            "variational covariance is not positive definite".into(),
        ));
    }
    let prior = prior_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("prior covariance is not positive definite".into()))?
        .unpack();
    let scaled = solve_lower(&prior, cov_factor);
    let whitened_mean = solve_lower(&prior, &DMatrix::from_column_slice(m, 1, mean.as_slice()));
    let trace = scaled.norm_squared();
    let maha = whitened_mean.norm_squared();
    Ok(0.5
        * (trace + maha - m as f64 + log_det_from_factor(&prior) - log_det_from_factor(cov_factor)))
}

/// Inducing inputs on the (item x time) grid: `num_inducing` points shared
/// out as evenly as possible across items (earlier items take the remainder),
/// each item's share spaced uniformly over `[t_min, t_max]`.
pub fn place_inducing(
    num_items: usize,
    num_inducing: usize,
    t_min: f64,
    t_max: f64,
) -> Result<Vec<TaskTimeInput>> {
    if num_items == 0 || num_inducing == 0 {
        return Err(Error::Config(
            "need at least one item and one inducing point".into(),
        ));
    }
    if !(t_min.is_finite() && t_max.is_finite()) || t_max < t_min {
        return Err(Error::Config(format!(
            "invalid time range [{t_min}, {t_max}]"
        )));
    }
    let (lo, hi) = if t_max > t_min {
        (t_min, t_max)
    } else {
        (t_min - 0.5, t_max + 0.5)
    };
    let base = num_inducing / num_items;
    let extra = num_inducing % num_items;
    let mut out = Vec::with_capacity(num_inducing);
    for item in 0..num_items {
        let count = base + usize::from(item < extra);
        for k in 0..count {
            let time = if count == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * k as f64 / (count - 1) as f64
            };
            out.push(TaskTimeInput { item, time });
        }
    }
    Ok(out)
}
