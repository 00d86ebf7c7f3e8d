//! Time kernels, task (coregionalization) kernels and their Kronecker-structured
//! joint covariance over (item, time) pairs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used when checking that an input matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Stationary kernel over the (real-valued) time axis.
///
/// Only the squared exponential is provided; other kernels plug in through
/// this trait.
pub trait TimeKernel: Send + Sync {
    fn eval(&self, t: f64, s: f64) -> f64;

    fn gram(&self, left: &[f64], right: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(left.len(), right.len(), |a, b| self.eval(left[a], right[b]))
    }
}

/// `k(t, t') = exp(-(t - t')^2 / l^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rbf {
    lengthscale: f64,
}

impl Rbf {
    pub fn new(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::Domain(format!(
                "length scale must be positive and finite, got {lengthscale}"
            )));
        }
        Ok(Self { lengthscale })
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    /// Derivative of `k(t, s)` with respect to `log l`.
    pub fn d_log_lengthscale(&self, t: f64, s: f64) -> f64 {
        let r2 = (t - s).powi(2) / (self.lengthscale * self.lengthscale);
        2.0 * r2 * (-r2).exp()
    }
}

impl TimeKernel for Rbf {
    #[inline]
    fn eval(&self, t: f64, s: f64) -> f64 {
        let d = t - s;
        (-(d * d) / (self.lengthscale * self.lengthscale)).exp()
    }
}

/// RBF Gram matrix over a set of time points.
pub fn rbf_time_kernel(times: &[f64], lengthscale: f64) -> Result<DMatrix<f64>> {
    if let Some(t) = times.iter().find(|t| !t.is_finite()) {
        return Err(Error::Domain(format!("time point {t} is not finite")));
    }
    let kernel = Rbf::new(lengthscale)?;
    Ok(kernel.gram(times, times))
}

/// Per-unit RBF length scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeKernelParams {
    lengthscale_per_unit: Vec<f64>,
}

impl TimeKernelParams {
    pub fn new(lengthscale_per_unit: Vec<f64>) -> Result<Self> {
        for (i, &l) in lengthscale_per_unit.iter().enumerate() {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::Domain(format!("length scale of unit {i} is {l}")));
            }
        }
        Ok(Self {
            lengthscale_per_unit,
        })
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscale_per_unit
    }

    pub fn kernel(&self, unit: usize) -> Result<Rbf> {
        let l = self
            .lengthscale_per_unit
            .get(unit)
            .ok_or_else(|| Error::Structural(format!("no length scale for unit {unit}")))?;
        Rbf::new(*l)
    }
}

/// Population loadings (`K x J`), one idiographic `J`-vector per unit and
/// per-item noise variances.
///
/// `K = 0` encodes a model without a population term; an empty `w_ind`
/// encodes a model without idiographic terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingSet {
    w_pop: DMatrix<f64>,
    w_ind: Vec<DVector<f64>>,
    noise: DVector<f64>,
}

impl LoadingSet {
    pub fn new(w_pop: DMatrix<f64>, w_ind: Vec<DVector<f64>>, noise: DVector<f64>) -> Result<Self> {
        let j = noise.len();
        if w_pop.ncols() != j {
            return Err(Error::Structural(format!(
                "population loadings have {} columns but there are {j} noise entries",
                w_pop.ncols()
            )));
        }
        if let Some((i, w)) = w_ind.iter().enumerate().find(|(_, w)| w.len() != j) {
            return Err(Error::Structural(format!(
                "idiographic loading of unit {i} has length {} (expected {j})",
                w.len()
            )));
        }
        if let Some(v) = noise.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("noise variance {v} is not positive")));
        }
        Ok(Self {
            w_pop,
            w_ind,
            noise,
        })
    }

    pub fn num_items(&self) -> usize {
        self.noise.len()
    }

    pub fn num_factors(&self) -> usize {
        self.w_pop.nrows()
    }

    pub fn w_pop(&self) -> &DMatrix<f64> {
        &self.w_pop
    }

    pub fn w_ind(&self) -> &[DVector<f64>] {
        &self.w_ind
    }

    pub fn noise(&self) -> &DVector<f64> {
        &self.noise
    }

    /// `W_pop^T W_pop + w_i w_i^T + diag(v)`.
    pub fn task_kernel_idiographic(&self, unit: usize) -> Result<DMatrix<f64>> {
        let w = self.w_ind.get(unit).ok_or_else(|| {
            Error::Structural(format!(
                "unit {unit} has no idiographic loading ({} units)",
                self.w_ind.len()
            ))
        })?;
        Ok(task_kernel_from_parts(&self.w_pop, Some(w), &self.noise))
    }

    /// `W_pop^T W_pop + diag(v)`.
    pub fn task_kernel_nomothetic(&self) -> DMatrix<f64> {
        task_kernel_from_parts(&self.w_pop, None, &self.noise)
    }
}

pub fn task_kernel_idiographic(loadings: &LoadingSet, unit: usize) -> Result<DMatrix<f64>> {
    loadings.task_kernel_idiographic(unit)
}

pub fn task_kernel_nomothetic(loadings: &LoadingSet) -> DMatrix<f64> {
    loadings.task_kernel_nomothetic()
}

/// Gram matrix of item loadings plus the optional rank-one idiographic term
/// and the noise diagonal. Callers guarantee consistent dimensions.
pub(crate) fn task_kernel_from_parts(
    w_pop: &DMatrix<f64>,
    w_ind: Option<&DVector<f64>>,
    noise: &DVector<f64>,
) -> DMatrix<f64> {
    let mut k = w_pop.tr_mul(w_pop);
    if let Some(w) = w_ind {
        k.ger(1.0, w, w, 1.0);
    }
    for (j, v) in noise.iter().enumerate() {
        k[(j, j)] += v;
    }
    k
}

/// A point in the (item, time) input domain of the multi-task process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskTimeInput {
    pub item: usize,
    pub time: f64,
}

/// `k((j, t), (j', t')) = task[j, j'] * time(t, t')` evaluated at arbitrary
/// inputs; [`JointCovariance`] is its realization on a fixed time grid.
#[derive(Debug, Clone)]
pub struct CoregionalKernel<K: TimeKernel = Rbf> {
    task: DMatrix<f64>,
    time: K,
}

impl<K: TimeKernel> CoregionalKernel<K> {
    pub fn new(task: DMatrix<f64>, time: K) -> Result<Self> {
        check_symmetric(&task, "task covariance")?;
        Ok(Self { task, time })
    }

    pub fn task(&self) -> &DMatrix<f64> {
        &self.task
    }

    pub fn time_kernel(&self) -> &K {
        &self.time
    }

    #[inline]
    pub fn eval(&self, a: &TaskTimeInput, b: &TaskTimeInput) -> f64 {
        self.task[(a.item, b.item)] * self.time.eval(a.time, b.time)
    }

    pub fn cross(&self, left: &[TaskTimeInput], right: &[TaskTimeInput]) -> DMatrix<f64> {
        DMatrix::from_fn(left.len(), right.len(), |a, b| {
            self.eval(&left[a], &right[b])
        })
    }

    /// Prior variances `k(x, x)`.
    pub fn diag(&self, inputs: &[TaskTimeInput]) -> Vec<f64> {
        inputs.iter().map(|x| self.eval(x, x)).collect()
    }

    /// Structured covariance over all items at the given times.
    pub fn grid_covariance(&self, times: &[f64]) -> Result<JointCovariance> {
        JointCovariance::new(self.task.clone(), self.time.gram(times, times))
    }
}

/// `task ⊗ time`, kept as its two factors.
///
/// Rows and columns of the dense form are ordered item-major: index
/// `j * T + t` holds item `j` at time `t`, i.e. the stacked
/// `[f_1; f_2; ...; f_J]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCovariance {
    task_cov: DMatrix<f64>,
    time_cov: DMatrix<f64>,
}

impl JointCovariance {
    pub fn new(task_cov: DMatrix<f64>, time_cov: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&task_cov, "task covariance")?;
        check_symmetric(&time_cov, "time covariance")?;
        Ok(Self { task_cov, time_cov })
    }

    pub fn task_cov(&self) -> &DMatrix<f64> {
        &self.task_cov
    }

    pub fn time_cov(&self) -> &DMatrix<f64> {
        &self.time_cov
    }

    pub fn num_items(&self) -> usize {
        self.task_cov.nrows()
    }

    pub fn num_times(&self) -> usize {
        self.time_cov.nrows()
    }

    /// Entry `((item, time), (item', time'))`.
    #[inline]
    pub fn entry(&self, item: usize, time: usize, item2: usize, time2: usize) -> f64 {
        self.task_cov[(item, item2)] * self.time_cov[(time, time2)]
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.task_cov.kronecker(&self.time_cov)
    }
}

pub fn joint_covariance(task_cov: DMatrix<f64>, time_cov: DMatrix<f64>) -> Result<JointCovariance> {
    JointCovariance::new(task_cov, time_cov)
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Structural(format!(
            "{what} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    for a in 0..m.nrows() {
        for b in (a + 1)..m.ncols() {
            let scale = 1.0_f64.max(m[(a, b)].abs());
            if (m[(a, b)] - m[(b, a)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Structural(format!(
                    "{what} is not symmetric at ({a}, {b}): {} vs {}",
                    m[(a, b)],
                    m[(b, a)]
                )));
            }
        }
    }
    Ok(())
}
