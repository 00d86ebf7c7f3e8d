use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Observation;
use crate::error::{Error, Result};

use super::adam::Adam;
use super::objective::{Gradients, Objective};
use super::params::{FreeParams, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Global minibatch size over all (unit, item, time) observations.
    pub batch_size: usize,
    pub num_inducing: usize,
    pub quadrature_points: usize,
    pub seed: u64,
    pub freeze_lengthscale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 256,
            num_inducing: 100,
            quadrature_points: 20,
            seed: 0,
            freeze_lengthscale: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.num_inducing == 0 {
            return Err(Error::Config(
                "number of inducing points must be positive".into(),
            ));
        }
        if self.quadrature_points == 0 {
            return Err(Error::Config("quadrature order must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of stochastic optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub state: ModelState,
    /// Minibatch ELBO estimate at every optimizer step.
    pub elbo_trace: Vec<f64>,
    /// Exact ELBO on the full training set after the last step.
    pub final_elbo: f64,
}

/// Maximizes the ELBO with Adam over shuffled minibatches.
pub fn fit(
    initial: ModelState,
    observations: &[Observation],
    free: FreeParams,
    config: &TrainConfig,
) -> Result<FitOutput> {
    config.validate()?;
    if observations.is_empty() {
        return Err(Error::Data("cannot fit on an empty dataset".into()));
    }
    initial.validate()?;
    let objective = Objective::new(config.quadrature_points, free)?;
    let mut state = initial;
    let mut flat = pack(&state, free);
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..observations.len()).collect();
    let mut trace = Vec::new();
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| observations[k]));
            let (value, grads) = objective
                .elbo_and_gradients(&state, &batch, observations.len())
                .map_err(|e| step_error(e, epoch, step, trace.last().copied()))?;
            let g = pack_gradient(&grads, &state, free);
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient component {k} at epoch {epoch}, step {step} (ELBO {value})"
                )));
            }
            trace.push(value);
            adam.ascend(&mut flat, &g);
            unpack(&mut state, free, &flat);
        }
    }
    let final_elbo = objective
        .elbo(&state, observations, observations.len())
        .map_err(|e| step_error(e, config.epochs, 0, trace.last().copied()))?;
    Ok(FitOutput {
        state,
        elbo_trace: trace,
        final_elbo,
    })
}

fn step_error(e: Error, epoch: usize, step: usize, last: Option<f64>) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "{msg} (epoch {epoch}, step {step}, previous ELBO {})",
            last.map_or("n/a".to_string(), |v| v.to_string())
        )),
        other => other,
    }
}

/// Flattens the free parameters. Factor diagonals are stored as logs.
pub fn pack(state: &ModelState, free: FreeParams) -> Vec<f64> {
    let p = &state.params;
    let mut out = Vec::new();
    if free.w_pop {
        out.extend(p.w_pop.iter());
    }
    if free.w_ind {
        out.extend(p.w_ind.iter());
    }
    if free.noise {
        out.extend(p.log_noise.iter());
    }
    if free.lengthscale {
        out.extend(p.log_lengthscale.iter());
    }
    if free.thresholds {
        out.extend(p.raw_cuts.iter());
    }
    if free.variational {
        for vs in &state.variational {
            out.extend(vs.mean().iter());
            let l = vs.cov_factor();
            for c in 0..l.ncols() {
                out.push(l[(c, c)].ln());
                for r in (c + 1)..l.nrows() {
                    out.push(l[(r, c)]);
                }
            }
        }
    }
    out
}

/// Inverse of [`pack`].
pub fn unpack(state: &mut ModelState, free: FreeParams, flat: &[f64]) {
    let mut it = flat.iter().copied();
    let p = &mut state.params;
    if free.w_pop {
        p.w_pop.iter_mut().for_each(|x| *x = it.next().unwrap());
    }
    if free.w_ind {
        p.w_ind.iter_mut().for_each(|x| *x = it.next().unwrap());
    }
    if free.noise {
        p.log_noise.iter_mut().for_each(|x| *x = it.next().unwrap());
    }
    if free.lengthscale {
        p.log_lengthscale
            .iter_mut()
            .for_each(|x| *x = it.next().unwrap());
    }
    if free.thresholds {
        p.raw_cuts.iter_mut().for_each(|x| *x = it.next().unwrap());
    }
    if free.variational {
        for vs in &mut state.variational {
            vs.mean_mut()
                .iter_mut()
                .for_each(|x| *x = it.next().unwrap());
            let l = vs.cov_factor_mut();
            for c in 0..l.ncols() {
                l[(c, c)] = it.next().unwrap().exp();
                for r in (c + 1)..l.nrows() {
                    l[(r, c)] = it.next().unwrap();
                }
            }
        }
    }
    debug_assert!(it.next().is_none());
}

/// Gradient in the packed coordinates of [`pack`].
pub fn pack_gradient(grads: &Gradients, state: &ModelState, free: FreeParams) -> Vec<f64> {
    let mut out = Vec::new();
    if free.w_pop {
        out.extend(grads.w_pop.iter());
    }
    if free.w_ind {
        out.extend(grads.w_ind.iter());
    }
    if free.noise {
        out.extend(grads.log_noise.iter());
    }
    if free.lengthscale {
        out.extend(grads.log_lengthscale.iter());
    }
    if free.thresholds {
        out.extend(grads.raw_cuts.iter());
    }
    if free.variational {
        for (unit, vs) in state.variational.iter().enumerate() {
            out.extend(grads.mean[unit].iter());
            let l = vs.cov_factor();
            let gl = &grads.cov_factor[unit];
            for c in 0..l.ncols() {
                out.push(gl[(c, c)] * l[(c, c)]);
                for r in (c + 1)..l.nrows() {
                    out.push(gl[(r, c)]);
                }
            }
        }
    }
    out
}
