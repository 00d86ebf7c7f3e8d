//! Independent reference computations shared by the unit-level suites and
//! the acceptance run. They measure, the callers decide.

use ipgp::data::Observation;
use ipgp::kernels::{CoregionalKernel, TaskTimeInput};
use ipgp::ordinal::{
    ordinal_log_prob, ordinal_probs, parameterize_thresholds, Link, OrdinalThresholds,
};
use ipgp::quadrature::GaussHermite;
use ipgp::svi::{
    fit, gauss_hermite_expectation, kl_gaussian, pack, pack_gradient, unpack, FreeParams,
    ModelParams, ModelState, Objective, TrainConfig, VariationalState,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Relative error with the denominator floored at `1e-4`, so that
/// near-zero gradients are compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Worst relative error between analytic and central-difference gradients
/// over every free coordinate.
pub fn finite_difference_error(
    state: &ModelState,
    batch: &[Observation],
    total: usize,
    free: FreeParams,
) -> f64 {
    let objective = Objective::new(20, free).unwrap();
    let (_, grads) = objective.elbo_and_gradients(state, batch, total).unwrap();
    let analytic = pack_gradient(&grads, state, free);
    let base = pack(state, free);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let eval = |delta: f64| {
            let mut s = state.clone();
            let mut x = base.clone();
            x[k] += delta;
            unpack(&mut s, free, &x);
            objective.elbo(&s, batch, total).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max(rel_err(analytic[k], fd));
    }
    worst
}

pub fn random_spd(r: &mut impl Rng, m: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| r.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(m, m) * 0.3
}

/// Closed-form KL of a random pair against a Monte-Carlo estimate:
/// `(closed, estimate, standard error)`.
pub fn kl_monte_carlo_case(r: &mut impl Rng, m: usize, samples: usize) -> (f64, f64, f64) {
    let prior = random_spd(r, m);
    let sigma = random_spd(r, m);
    let mean = DVector::from_fn(m, |_, _| r.random_range(-1.0..1.0));
    let l = sigma.clone().cholesky().unwrap().unpack();
    let closed = kl_gaussian(&mean, &l, &prior).unwrap();

    // E_q[log q - log p] by sampling q
    let prior_inv = prior.clone().try_inverse().unwrap();
    let sigma_inv = sigma.clone().try_inverse().unwrap();
    let logdet_ratio = prior.determinant().ln() - sigma.determinant().ln();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut eps = DVector::zeros(m);
    for _ in 0..samples {
        eps.iter_mut().for_each(|e| *e = StandardNormal.sample(r));
        let d = &l * &eps;
        let x = &d + &mean;
        let log_ratio =
            0.5 * (logdet_ratio + x.dot(&(&prior_inv * &x)) - d.dot(&(&sigma_inv * &d)));
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let n = samples as f64;
    let est = sum / n;
    let se = ((sum_sq / n - est * est) / n).sqrt();
    (closed, est, se)
}

/// Expected log band probability by a 200k-panel trapezoid rule over
/// `mean +- 8 sd`.
pub fn trapezoid_expectation(
    mean: f64,
    var: f64,
    level: usize,
    t: &OrdinalThresholds,
    link: Link,
) -> f64 {
    let sd = var.sqrt();
    let n = 200_000;
    let (lo, hi) = (mean - 8.0 * sd, mean + 8.0 * sd);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for k in 0..=n {
        let f = lo + h * k as f64;
        let dens =
            (-(f - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        acc += w * dens * ordinal_log_prob(level, f, t, link).unwrap();
    }
    acc * h
}

/// A random ordinal integrand evaluated by order-20 Gauss-Hermite and by the
/// trapezoid oracle: `(gh, oracle, variance)`.
pub fn quadrature_case(r: &mut impl Rng, max_var: f64) -> (f64, f64, f64) {
    let levels = r.random_range(2..7);
    let raw: Vec<f64> = (0..levels - 1).map(|_| r.random_range(-1.5..1.5)).collect();
    let t = parameterize_thresholds(&raw);
    let level = r.random_range(1..=levels);
    let mean = r.random_range(-3.0..3.0);
    let var = r.random_range(0.01..max_var);
    let gh = gauss_hermite_expectation(mean, var, level, &t, Link::Logit, 20).unwrap();
    (
        gh,
        trapezoid_expectation(mean, var, level, &t, Link::Logit),
        var,
    )
}

/// Exact log evidence of a single-item, three-time, binary instance by a
/// product Gauss-Hermite rule in the whitened prior coordinates.
pub fn exact_log_evidence(
    prior: &DMatrix<f64>,
    obs: &[Observation],
    t: &OrdinalThresholds,
    order: usize,
) -> f64 {
    let rule = GaussHermite::new(order).unwrap();
    let l = prior.clone().cholesky().unwrap().unpack();
    let norm = std::f64::consts::PI.powf(-1.5);
    let scale = 2.0f64.sqrt();
    let mut total = 0.0;
    for (xa, wa) in rule.nodes().iter().zip(rule.weights()) {
        for (xb, wb) in rule.nodes().iter().zip(rule.weights()) {
            for (xc, wc) in rule.nodes().iter().zip(rule.weights()) {
                let z = DVector::from_vec(vec![scale * xa, scale * xb, scale * xc]);
                let f = &l * z;
                let lik: f64 = obs
                    .iter()
                    .enumerate()
                    .map(|(n, o)| ordinal_probs(f[n], t, Link::Logit)[o.response - 1])
                    .product();
                total += wa * wb * wc * lik;
            }
        }
    }
    (total * norm).ln()
}

/// Outcome of optimizing the bound on an exactly integrable instance.
pub struct EvidenceCase {
    pub elbo: f64,
    pub exact: f64,
    /// Difference between the order-60 and order-80 evidence rules.
    pub oracle_drift: f64,
}

/// Random single-unit, single-item binary instance with inducing inputs at
/// the three observation times; only the variational posterior is trained.
pub fn evidence_case(r: &mut impl Rng) -> EvidenceCase {
    let times = [0.0, 1.0, 2.5];
    let w: f64 = r.random_range(0.5..2.0);
    let ls: f64 = r.random_range(0.8..3.0);
    let cut = r.random_range(-0.5..0.5);
    let obs: Vec<Observation> = times
        .iter()
        .map(|&time| Observation {
            unit: 0,
            item: 0,
            time,
            response: r.random_range(1..=2),
        })
        .collect();
    let params = ModelParams {
        w_pop: DMatrix::from_element(1, 1, w),
        w_ind: DMatrix::zeros(1, 1),
        log_noise: DVector::from_element(1, (0.1f64).ln()),
        log_lengthscale: DVector::from_element(1, ls.ln()),
        raw_cuts: DVector::from_element(1, cut),
    };
    let inducing: Vec<TaskTimeInput> = times
        .iter()
        .map(|&time| TaskTimeInput { item: 0, time })
        .collect();
    let state = ModelState {
        params: params.clone(),
        variational: vec![VariationalState::init(inducing.clone(), 1.0).unwrap()],
        link: Link::Logit,
    };
    let free = FreeParams {
        w_pop: false,
        w_ind: false,
        noise: false,
        lengthscale: false,
        thresholds: false,
        variational: true,
    };
    let config = TrainConfig {
        epochs: 4000,
        batch_size: 3,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let fitted = fit(state, &obs, free, &config).unwrap();

    let kernel =
        CoregionalKernel::new(params.task_kernel(0), params.time_kernel(0).unwrap()).unwrap();
    let prior = kernel.cross(&inducing, &inducing);
    let t = params.thresholds();
    let exact = exact_log_evidence(&prior, &obs, &t, 60);
    let check = exact_log_evidence(&prior, &obs, &t, 80);
    EvidenceCase {
        elbo: fitted.final_elbo,
        exact,
        oracle_drift: (exact - check).abs(),
    }
}
