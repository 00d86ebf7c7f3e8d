#![allow(dead_code)]

pub mod oracles;

use ipgp::data::Observation;
use ipgp::kernels::TaskTimeInput;
use ipgp::ordinal::Link;
use ipgp::svi::{ModelParams, ModelState, VariationalState};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small random model: `units` units, `items` items, `factors` factors,
/// `levels` levels, `m` inducing inputs per unit placed on a grid.
pub fn random_state(
    seed: u64,
    units: usize,
    items: usize,
    factors: usize,
    levels: usize,
    m: usize,
) -> ModelState {
    let mut r = rng(seed);
    let mut u = |lo: f64, hi: f64| r.random_range(lo..hi);
    let params = ModelParams {
        w_pop: DMatrix::from_fn(factors, items, |_, _| u(-1.0, 1.0)),
        w_ind: DMatrix::from_fn(units, items, |_, _| u(-0.8, 0.8)),
        log_noise: DVector::from_fn(items, |_, _| u(-1.0, 0.0)),
        log_lengthscale: DVector::from_fn(units, |_, _| u(0.3, 1.2)),
        raw_cuts: DVector::from_fn(levels - 1, |k, _| if k == 0 { -1.0 } else { u(-0.5, 0.5) }),
    };
    let variational = (0..units)
        .map(|_| {
            let inducing: Vec<TaskTimeInput> = (0..m)
                .map(|k| TaskTimeInput {
                    item: k % items,
                    time: (k / items) as f64 * 1.3 + 0.2 * (k % items) as f64,
                })
                .collect();
            let mean = DVector::from_fn(m, |_, _| u(-1.0, 1.0));
            let mut l = DMatrix::from_fn(m, m, |_, _| u(-0.3, 0.3));
            for a in 0..m {
                l[(a, a)] = u(0.3, 1.0);
                for b in (a + 1)..m {
                    l[(a, b)] = 0.0;
                }
            }
            VariationalState::new(inducing, mean, l).unwrap()
        })
        .collect();
    ModelState {
        params,
        variational,
        link: Link::Logit,
    }
}

/// Every (unit, item, time) cell on `times`, with random levels.
pub fn full_grid(
    seed: u64,
    units: usize,
    items: usize,
    times: &[f64],
    levels: usize,
) -> Vec<Observation> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for unit in 0..units {
        for item in 0..items {
            for &time in times {
                out.push(Observation {
                    unit,
                    item,
                    time,
                    response: r.random_range(1..=levels),
                });
            }
        }
    }
    out
}
