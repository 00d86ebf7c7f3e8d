//! The sparse variational lower bound and its gradients.
//!
//! For unit `i` with inducing inputs `Z` and whitened `q(v) = N(m, S S^T)`:
//!
//! ```text
//! A      = L_uu^{-1} K_uf
//! mean_n = A_n^T m
//! var_n  = k_nn - |A_n|^2 + |S^T A_n|^2
//! ELBO   = (N / |B|) Σ_{n in B} E_{N(mean_n, var_n)}[log p(y_n | f)] - Σ_i KL(q(v_i) || N(0, I))
//! ```
//!
//! Gradients are propagated by hand through the quadrature, the whitened
//! projection, the triangular solve and the Cholesky factorization down to
//! the task kernel and length scale of each unit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::kernels::{CoregionalKernel, Rbf, TaskTimeInput};
use crate::linalg::{
    cholesky_backward, cholesky_jittered, solve_lower, solve_lower_transpose, tril_in_place,
};
use crate::ordinal::{ordinal_log_prob_grad, threshold_raw_gradient, Link, OrdinalThresholds};
use crate::quadrature::GaussHermite;

use super::params::{FreeParams, ModelParams, ModelState};
use super::state::VariationalState;

/// Predictive variances are floored here before taking square roots.
pub const MIN_VARIANCE: f64 = 1e-10;

/// Gradient of the ELBO, shaped like [`ModelParams`] plus the per-unit
/// variational parameters. Frozen groups are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_pop: DMatrix<f64>,
    pub w_ind: DMatrix<f64>,
    pub log_noise: DVector<f64>,
    pub log_lengthscale: DVector<f64>,
    pub raw_cuts: DVector<f64>,
    pub mean: Vec<DVector<f64>>,
    /// With respect to the entries of each lower-triangular factor.
    pub cov_factor: Vec<DMatrix<f64>>,
}

impl Gradients {
    fn zeros_like(state: &ModelState) -> Self {
        let p = &state.params;
        Self {
            w_pop: DMatrix::zeros(p.w_pop.nrows(), p.w_pop.ncols()),
            w_ind: DMatrix::zeros(p.w_ind.nrows(), p.w_ind.ncols()),
            log_noise: DVector::zeros(p.log_noise.len()),
            log_lengthscale: DVector::zeros(p.log_lengthscale.len()),
            raw_cuts: DVector::zeros(p.raw_cuts.len()),
            mean: state
                .variational
                .iter()
                .map(|v| DVector::zeros(v.num_inducing()))
                .collect(),
            cov_factor: state
                .variational
                .iter()
                .map(|v| DMatrix::zeros(v.num_inducing(), v.num_inducing()))
                .collect(),
        }
    }
}

/// Quadrature rule plus the set of parameters that receive gradients.
#[derive(Debug, Clone)]
pub struct Objective {
    quadrature: GaussHermite,
    free: FreeParams,
}

struct UnitOutput {
    data: f64,
    kl: f64,
    grad: Option<UnitGrad>,
}

struct UnitGrad {
    task: DMatrix<f64>,
    log_lengthscale: f64,
    cuts: Vec<f64>,
    mean: DVector<f64>,
    cov_factor: DMatrix<f64>,
}

/// Expected log-likelihood of one observation under `N(mean, var)` with its
/// derivatives.
struct Expectation {
    value: f64,
    d_mean: f64,
    d_var: f64,
    d_upper_cut: f64,
    d_lower_cut: f64,
}

impl Objective {
    pub fn new(quadrature_points: usize, free: FreeParams) -> Result<Self> {
        Ok(Self {
            quadrature: GaussHermite::new(quadrature_points)?,
            free,
        })
    }

    pub fn quadrature(&self) -> &GaussHermite {
        &self.quadrature
    }

    pub fn free(&self) -> FreeParams {
        self.free
    }

    /// Minibatch ELBO estimate; the data term is rescaled by
    /// `total / batch.len()`. Pass `total = batch.len()` for the exact
    /// full-data bound.
    pub fn elbo(&self, state: &ModelState, batch: &[Observation], total: usize) -> Result<f64> {
        Ok(self.evaluate(state, batch, total, false)?.0)
    }

    pub fn elbo_and_gradients(
        &self,
        state: &ModelState,
        batch: &[Observation],
        total: usize,
    ) -> Result<(f64, Gradients)> {
        let (value, grad) = self.evaluate(state, batch, total, true)?;
        Ok((value, grad.expect("gradients requested")))
    }

    fn evaluate(
        &self,
        state: &ModelState,
        batch: &[Observation],
        total: usize,
        want_grad: bool,
    ) -> Result<(f64, Option<Gradients>)> {
        state.validate()?;
        let n_units = state.params.num_units();
        let mut rows: Vec<Vec<Observation>> = vec![Vec::new(); n_units];
        for obs in batch {
            if obs.unit >= n_units || obs.item >= state.params.num_items() {
                return Err(Error::Data(format!(
                    "observation (unit {}, item {}) outside the model's {} units x {} items",
                    obs.unit,
                    obs.item,
                    n_units,
                    state.params.num_items()
                )));
            }
            if obs.response == 0 || obs.response > state.params.num_levels() {
                return Err(Error::Data(format!(
                    "response {} outside 1..={}",
                    obs.response,
                    state.params.num_levels()
                )));
            }
            rows[obs.unit].push(*obs);
        }
        let scale = if batch.is_empty() {
            0.0
        } else {
            total as f64 / batch.len() as f64
        };
        let thresholds = state.params.thresholds();

        let outputs: Vec<Result<UnitOutput>> = (0..n_units)
            .into_par_iter()
            .map(|unit| self.unit_terms(state, unit, &rows[unit], scale, &thresholds, want_grad))
            .collect();

        let mut value = 0.0;
        let mut grads = want_grad.then(|| Gradients::zeros_like(state));
        let mut d_cuts = vec![0.0; thresholds.cuts().len()];
        for (unit, out) in outputs.into_iter().enumerate() {
            let out = out?;
            value += out.data - out.kl;
            if let (Some(g), Some(u)) = (grads.as_mut(), out.grad) {
                self.scatter_unit(state, unit, u, g, &mut d_cuts);
            }
        }
        if !value.is_finite() {
            return Err(Error::Numerical(format!("ELBO evaluated to {value}")));
        }
        if let Some(g) = grads.as_mut() {
            if self.free.thresholds {
                let raw = threshold_raw_gradient(state.params.raw_cuts.as_slice(), &d_cuts);
                g.raw_cuts = DVector::from_vec(raw);
            }
        }
        Ok((value, grads))
    }

    /// Moves a unit's task-kernel cotangent onto the loadings and noise.
    fn scatter_unit(
        &self,
        state: &ModelState,
        unit: usize,
        u: UnitGrad,
        g: &mut Gradients,
        d_cuts: &mut [f64],
    ) {
        let p = &state.params;
        let sym = &u.task + u.task.transpose();
        if self.free.w_pop && p.num_factors() > 0 {
            g.w_pop += &p.w_pop * &sym;
        }
        if self.free.w_ind {
            let w = p.idiographic_loading(unit);
            let gw = &sym * w;
            g.w_ind.row_mut(unit).copy_from(&gw.transpose());
        }
        if self.free.noise {
            for j in 0..p.num_items() {
                g.log_noise[j] += u.task[(j, j)] * p.log_noise[j].exp();
            }
        }
        if self.free.lengthscale {
            g.log_lengthscale[unit] = u.log_lengthscale;
        }
        for (acc, d) in d_cuts.iter_mut().zip(&u.cuts) {
            *acc += d;
        }
        if self.free.variational {
            g.mean[unit] = u.mean;
            g.cov_factor[unit] = u.cov_factor;
        }
    }

    fn expectation(
        &self,
        mean: f64,
        var: f64,
        level: usize,
        thresholds: &OrdinalThresholds,
        link: Link,
    ) -> Expectation {
        let mut e = Expectation {
            value: 0.0,
            d_mean: 0.0,
            d_var: 0.0,
            d_upper_cut: 0.0,
            d_lower_cut: 0.0,
        };
        let inv = 1.0 / (2.0 * var).sqrt();
        for (f, w, x) in self.quadrature.points(mean, var) {
            let g = ordinal_log_prob_grad(level, f, thresholds, link);
            e.value += w * g.value;
            e.d_mean += w * g.d_f;
            // df/dvar = x / sqrt(2 var)
            e.d_var += w * g.d_f * x * inv;
            e.d_upper_cut += w * g.d_upper_cut;
            e.d_lower_cut += w * g.d_lower_cut;
        }
        e
    }

    fn unit_terms(
        &self,
        state: &ModelState,
        unit: usize,
        rows: &[Observation],
        scale: f64,
        thresholds: &OrdinalThresholds,
        want_grad: bool,
    ) -> Result<UnitOutput> {
        let params: &ModelParams = &state.params;
        let vs: &VariationalState = &state.variational[unit];
        let kl = vs.kl_whitened();
        let mu = vs.mean();
        let s = vs.cov_factor();
        let m = vs.num_inducing();

        let kl_grad = || {
            let mut d_s = -s.clone();
            for a in 0..m {
                d_s[(a, a)] += 1.0 / s[(a, a)];
            }
            (-mu.clone(), d_s)
        };

        if rows.is_empty() {
            let grad = want_grad.then(|| {
                let (d_mu, d_s) = kl_grad();
                UnitGrad {
                    task: DMatrix::zeros(params.num_items(), params.num_items()),
                    log_lengthscale: 0.0,
                    cuts: vec![0.0; thresholds.cuts().len()],
                    mean: d_mu,
                    cov_factor: d_s,
                }
            });
            return Ok(UnitOutput {
                data: 0.0,
                kl,
                grad,
            });
        }

        let time_kernel = params.time_kernel(unit)?;
        let kernel = CoregionalKernel::new(params.task_kernel(unit), time_kernel)?;
        let z = vs.inducing();
        let x: Vec<TaskTimeInput> = rows
            .iter()
            .map(|o| TaskTimeInput {
                item: o.item,
                time: o.time,
            })
            .collect();
        let kuu = kernel.cross(z, z);
        let (l, _) = cholesky_jittered(&kuu).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("unit {unit}: {msg}")),
            other => other,
        })?;
        let kuf = kernel.cross(z, &x);
        let a = solve_lower(&l, &kuf);
        let means = a.tr_mul(mu);
        let b = s.tr_mul(&a);

        let n = rows.len();
        let mut data = 0.0;
        let mut g_mean = DVector::zeros(n);
        let mut g_var = DVector::zeros(n);
        let mut d_cuts = vec![0.0; thresholds.cuts().len()];
        for (col, obs) in rows.iter().enumerate() {
            let raw_var = kernel.eval(&x[col], &x[col]) - a.column(col).norm_squared()
                + b.column(col).norm_squared();
            let clamped = raw_var < MIN_VARIANCE;
            let var = raw_var.max(MIN_VARIANCE);
            let e = self.expectation(means[col], var, obs.response, thresholds, state.link);
            data += e.value;
            g_mean[col] = scale * e.d_mean;
            g_var[col] = if clamped { 0.0 } else { scale * e.d_var };
            if obs.response <= d_cuts.len() {
                d_cuts[obs.response - 1] += scale * e.d_upper_cut;
            }
            if obs.response >= 2 {
                d_cuts[obs.response - 2] += scale * e.d_lower_cut;
            }
        }
        data *= scale;

        if !want_grad {
            return Ok(UnitOutput {
                data,
                kl,
                grad: None,
            });
        }

        let (mut d_mu, mut d_s) = kl_grad();
        d_mu += &a * &g_mean;

        // b scaled column-wise by 2 g_var
        let mut b_scaled = b.clone();
        let mut a_scaled = a.clone();
        for col in 0..n {
            let f = 2.0 * g_var[col];
            b_scaled.column_mut(col).scale_mut(f);
            a_scaled.column_mut(col).scale_mut(f);
        }
        let mut d_s_data = &a * b_scaled.transpose();
        tril_in_place(&mut d_s_data);
        d_s += d_s_data;

        let mut d_task = DMatrix::zeros(params.num_items(), params.num_items());
        let mut d_log_ls = 0.0;
        if self.free.any_kernel() {
            let mut d_a = mu * g_mean.transpose();
            d_a += s * &b_scaled;
            d_a -= &a_scaled;

            let d_kuf = solve_lower_transpose(&l, &d_a);
            let mut d_l = -(&d_kuf * a.transpose());
            tril_in_place(&mut d_l);
            let d_kuu = cholesky_backward(&l, &d_l);

            let task = kernel.task();
            let rbf: &Rbf = kernel.time_kernel();
            use crate::kernels::TimeKernel;
            for (col, xn) in x.iter().enumerate() {
                d_task[(xn.item, xn.item)] += g_var[col];
                for (r, zr) in z.iter().enumerate() {
                    let coef = d_kuf[(r, col)];
                    d_task[(zr.item, xn.item)] += coef * rbf.eval(zr.time, xn.time);
                    d_log_ls +=
                        coef * task[(zr.item, xn.item)] * rbf.d_log_lengthscale(zr.time, xn.time);
                }
            }
            for (r, zr) in z.iter().enumerate() {
                for (c, zc) in z.iter().enumerate() {
                    let coef = d_kuu[(r, c)];
                    d_task[(zr.item, zc.item)] += coef * rbf.eval(zr.time, zc.time);
                    d_log_ls +=
                        coef * task[(zr.item, zc.item)] * rbf.d_log_lengthscale(zr.time, zc.time);
                }
            }
        }

        Ok(UnitOutput {
            data,
            kl,
            grad: Some(UnitGrad {
                task: d_task,
                log_lengthscale: d_log_ls,
                cuts: d_cuts,
                mean: d_mu,
                cov_factor: d_s,
            }),
        })
    }
}
