use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{task_kernel_from_parts, LoadingSet, Rbf, TimeKernelParams};
use crate::ordinal::{parameterize_thresholds, Link, OrdinalThresholds};

use super::state::VariationalState;

/// Kernel and likelihood hyperparameters in their unconstrained
/// parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `K x J`; `K = 0` means no population term.
    pub w_pop: DMatrix<f64>,
    /// `n x J`, row `i` is the idiographic loading `w_i`. All zero and frozen
    /// for nomothetic models.
    pub w_ind: DMatrix<f64>,
    pub log_noise: DVector<f64>,
    pub log_lengthscale: DVector<f64>,
    pub raw_cuts: DVector<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let j = self.log_noise.len();
        if self.w_pop.ncols() != j || self.w_ind.ncols() != j {
            return Err(Error::Structural(format!(
                "loadings have {} / {} columns, noise has {j} entries",
                self.w_pop.ncols(),
                self.w_ind.ncols()
            )));
        }
        if self.w_ind.nrows() != self.log_lengthscale.len() {
            return Err(Error::Structural(format!(
                "{} idiographic loadings but {} length scales",
                self.w_ind.nrows(),
                self.log_lengthscale.len()
            )));
        }
        let all = self
            .w_pop
            .iter()
            .chain(self.w_ind.iter())
            .chain(self.log_noise.iter())
            .chain(self.log_lengthscale.iter())
            .chain(self.raw_cuts.iter());
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(())
    }

    pub fn num_units(&self) -> usize {
        self.w_ind.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.log_noise.len()
    }

    pub fn num_factors(&self) -> usize {
        self.w_pop.nrows()
    }

    pub fn num_levels(&self) -> usize {
        self.raw_cuts.len() + 1
    }

    pub fn noise(&self) -> DVector<f64> {
        self.log_noise.map(f64::exp)
    }

    pub fn lengthscale(&self, unit: usize) -> f64 {
        self.log_lengthscale[unit].exp()
    }

    pub fn time_kernel(&self, unit: usize) -> Result<Rbf> {
        Rbf::new(self.lengthscale(unit))
    }

    pub fn time_kernel_params(&self) -> Result<TimeKernelParams> {
        TimeKernelParams::new(self.log_lengthscale.iter().map(|l| l.exp()).collect())
    }

    pub fn thresholds(&self) -> OrdinalThresholds {
        parameterize_thresholds(self.raw_cuts.as_slice())
    }

    pub fn idiographic_loading(&self, unit: usize) -> DVector<f64> {
        self.w_ind.row(unit).transpose()
    }

    /// Task kernel of one unit.
    pub fn task_kernel(&self, unit: usize) -> DMatrix<f64> {
        let w = self.idiographic_loading(unit);
        task_kernel_from_parts(&self.w_pop, Some(&w), &self.noise())
    }

    /// Task kernel without the idiographic term.
    pub fn population_task_kernel(&self) -> DMatrix<f64> {
        task_kernel_from_parts(&self.w_pop, None, &self.noise())
    }

    pub fn loading_set(&self) -> Result<LoadingSet> {
        let w_ind = (0..self.num_units())
            .map(|i| self.idiographic_loading(i))
            .collect();
        LoadingSet::new(self.w_pop.clone(), w_ind, self.noise())
    }
}

/// Which parameter groups the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeParams {
    pub w_pop: bool,
    pub w_ind: bool,
    pub noise: bool,
    pub lengthscale: bool,
    pub thresholds: bool,
    pub variational: bool,
}

impl FreeParams {
    pub fn all() -> Self {
        Self {
            w_pop: true,
            w_ind: true,
            noise: true,
            lengthscale: true,
            thresholds: true,
            variational: true,
        }
    }

    /// True when any kernel hyperparameter is free, i.e. when gradients must
    /// flow through the inducing covariance.
    pub fn any_kernel(&self) -> bool {
        self.w_pop || self.w_ind || self.noise || self.lengthscale
    }
}

/// Everything needed to evaluate the variational objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: ModelParams,
    /// One whitened variational posterior per unit.
    pub variational: Vec<VariationalState>,
    pub link: Link,
}

impl ModelState {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.variational.len() != self.params.num_units() {
            return Err(Error::Structural(format!(
                "{} variational states for {} units",
                self.variational.len(),
                self.params.num_units()
            )));
        }
        let j = self.params.num_items();
        for (i, vs) in self.variational.iter().enumerate() {
            if let Some(z) = vs.inducing().iter().find(|z| z.item >= j) {
                return Err(Error::Structural(format!(
                    "unit {i} has an inducing input on item {} of {j}",
                    z.item
                )));
            }
        }
        Ok(())
    }
}
