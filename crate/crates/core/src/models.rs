//! Model variants (full IPGP and its ablations), the two-stage
//! informative-prior workflow and ELBO-based Bayes-factor comparison.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Observation, ResponseDataset};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_and_ll, MetricReport};
use crate::ordinal::{unparameterize_thresholds, Link, OrdinalThresholds};
use crate::quadrature::GaussHermite;
use crate::svi::{
    fit, place_inducing, predict_responses, FitOutput, FreeParams, ModelParams, ModelState,
    Objective, Query, TrainConfig, VariationalState,
};

/// Population rank used by the low-rank ablation.
pub const LOW_RANK: usize = 2;
/// Whitened scale of the initial variational covariance factor.
pub const INIT_COV_SCALE: f64 = 0.1;
/// Standard deviation of the initial idiographic loadings.
pub const INIT_IND_SD: f64 = 0.1;
/// Standard deviation of freely learned initial population loadings.
pub const INIT_POP_SD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String")]
pub enum Variant {
    #[serde(rename = "IPGP")]
    Ipgp,
    #[serde(rename = "IPGP-NOM")]
    Nom,
    #[serde(rename = "IPGP-IND")]
    Ind,
    #[serde(rename = "IPGP-LOW")]
    Low,
    #[serde(rename = "IPGP-NP")]
    Np,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Ipgp,
        Variant::Nom,
        Variant::Ind,
        Variant::Low,
        Variant::Np,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Ipgp => "IPGP",
            Variant::Nom => "IPGP-NOM",
            Variant::Ind => "IPGP-IND",
            Variant::Low => "IPGP-LOW",
            Variant::Np => "IPGP-NP",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        let key = key.strip_prefix("IPGP-").unwrap_or(&key);
        match key {
            "IPGP" => Ok(Variant::Ipgp),
            "NOM" => Ok(Variant::Nom),
            "IND" => Ok(Variant::Ind),
            "LOW" => Ok(Variant::Low),
            "NP" => Ok(Variant::Np),
            _ => Err(Error::Config(format!("unknown model variant '{s}'"))),
        }
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WPopMode {
    FrozenFromPrior,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Population rank `K`; zero when the population term is omitted.
    pub num_factors: usize,
    pub idiographic_rank: usize,
    pub w_pop_mode: WPopMode,
    pub num_levels: usize,
    pub link: Link,
}

impl ModelSpec {
    /// Canonical spec of a variant for a model of full population rank
    /// `num_factors`.
    pub fn for_variant(variant: Variant, num_factors: usize, num_levels: usize) -> Self {
        let (k, rank, mode) = match variant {
            Variant::Ipgp => (num_factors, 1, WPopMode::FrozenFromPrior),
            Variant::Nom => (num_factors, 0, WPopMode::Free),
            Variant::Ind => (0, 1, WPopMode::Free),
            Variant::Low => (LOW_RANK.min(num_factors), 1, WPopMode::FrozenFromPrior),
            Variant::Np => (num_factors, 1, WPopMode::Free),
        };
        Self {
            variant,
            num_factors: k,
            idiographic_rank: rank,
            w_pop_mode: mode,
            num_levels,
            link: Link::Logit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Structural(format!("{}: {msg}", self.variant)));
        if self.num_levels < 2 {
            return bad("at least two response levels are required");
        }
        if self.idiographic_rank > 1 {
            return bad("idiographic rank is at most 1");
        }
        match self.variant {
            Variant::Nom if self.idiographic_rank != 0 => {
                bad("the nomothetic model has no idiographic term")
            }
            Variant::Ind if self.num_factors != 0 => bad("the population term is omitted"),
            Variant::Ipgp if self.w_pop_mode != WPopMode::FrozenFromPrior => {
                bad("population loadings are frozen at the prior estimate")
            }
            Variant::Np if self.w_pop_mode != WPopMode::Free => {
                bad("population loadings are learned")
            }
            Variant::Ipgp | Variant::Np | Variant::Low | Variant::Ind
                if self.idiographic_rank != 1 =>
            {
                bad("the idiographic term has rank 1")
            }
            Variant::Nom | Variant::Ipgp | Variant::Np | Variant::Low if self.num_factors == 0 => {
                bad("a population rank of at least 1 is required")
            }
            _ => Ok(()),
        }
    }

    pub fn needs_prior(&self) -> bool {
        self.num_factors > 0 && self.w_pop_mode == WPopMode::FrozenFromPrior
    }

    /// Parameter groups moved by the optimizer.
    pub fn free_params(&self, config: &TrainConfig) -> FreeParams {
        FreeParams {
            w_pop: self.num_factors > 0 && self.w_pop_mode == WPopMode::Free,
            w_ind: self.idiographic_rank > 0,
            noise: true,
            lengthscale: !config.freeze_lengthscale,
            thresholds: true,
            variational: true,
        }
    }
}

/// An initialized, not yet fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub state: ModelState,
    pub free: FreeParams,
}

/// Evenly spaced cuts over `[-2, 2]`.
pub fn initial_thresholds(num_levels: usize) -> OrdinalThresholds {
    let n = num_levels - 1;
    let cuts = (0..n)
        .map(|c| {
            if n == 1 {
                0.0
            } else {
                -2.0 + 4.0 * c as f64 / (n - 1) as f64
            }
        })
        .collect();
    OrdinalThresholds::new(cuts).expect("evenly spaced cuts are increasing")
}

/// Wires the task kernel and free-parameter set of `spec` and draws the
/// initialization from `config.seed`.
pub fn build_model(
    spec: &ModelSpec,
    dataset: &ResponseDataset,
    prior_w_pop: Option<&DMatrix<f64>>,
    config: &TrainConfig,
) -> Result<Model> {
    spec.validate()?;
    config.validate()?;
    let (n, j) = (dataset.num_units(), dataset.num_items());
    if spec.num_levels != dataset.num_levels() {
        return Err(Error::Structural(format!(
            "{} specifies {} levels, data has {}",
            spec.variant,
            spec.num_levels,
            dataset.num_levels()
        )));
    }
    if n == 0 || j == 0 {
        return Err(Error::Structural("dataset has no units or no items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let w_pop = match (spec.needs_prior(), prior_w_pop) {
        (true, Some(w)) if w.shape() == (spec.num_factors, j) => w.clone(),
        (true, Some(w)) => {
            return Err(Error::Structural(format!(
                "prior loadings are {}x{}, expected {}x{j}",
                w.nrows(),
                w.ncols(),
                spec.num_factors
            )))
        }
        (true, None) => {
            return Err(Error::Structural(format!(
                "{} needs prior population loadings",
                spec.variant
            )));
        }
        (false, _) => {
            let normal = Normal::new(0.0, INIT_POP_SD).expect("valid normal");
            DMatrix::from_fn(spec.num_factors, j, |_, _| normal.sample(&mut rng))
        }
    };
    let w_ind = if spec.idiographic_rank > 0 {
        let normal = Normal::new(0.0, INIT_IND_SD).expect("valid normal");
        DMatrix::from_fn(n, j, |_, _| normal.sample(&mut rng))
    } else {
        DMatrix::zeros(n, j)
    };

    let global = global_time_range(dataset.observations());
    let mut log_lengthscale = DVector::zeros(n);
    let mut variational = Vec::with_capacity(n);
    for unit in 0..n {
        let (lo, hi) = dataset.time_range(unit).or(global).unwrap_or((0.0, 1.0));
        let range = hi - lo;
        log_lengthscale[unit] = if range > 0.0 { (range / 4.0).ln() } else { 0.0 };
        let inducing = place_inducing(j, config.num_inducing, lo, hi)?;
        variational.push(VariationalState::init(inducing, INIT_COV_SCALE)?);
    }
    let params = ModelParams {
        w_pop,
        w_ind,
        log_noise: DVector::zeros(j),
        log_lengthscale,
        raw_cuts: DVector::from_vec(unparameterize_thresholds(&initial_thresholds(
            spec.num_levels,
        ))),
    };
    let state = ModelState {
        params,
        variational,
        link: spec.link,
    };
    state.validate()?;
    Ok(Model {
        spec: spec.clone(),
        state,
        free: spec.free_params(config),
    })
}

fn global_time_range(obs: &[Observation]) -> Option<(f64, f64)> {
    obs.iter().fold(None, |acc, o| match acc {
        None => Some((o.time, o.time)),
        Some((lo, hi)) => Some((lo.min(o.time), hi.max(o.time))),
    })
}

impl Model {
    /// Starts from another fitted state: shared hyperparameters, thresholds
    /// and variational posteriors are copied; this model's own loadings are
    /// kept.
    pub fn warm_start(&mut self, from: &ModelState) -> Result<()> {
        let p = &from.params;
        let q = &mut self.state.params;
        if p.num_items() != q.num_items()
            || p.num_units() != q.num_units()
            || p.num_levels() != q.num_levels()
        {
            return Err(Error::Structural(
                "warm start from a model of different dimensions".into(),
            ));
        }
        q.log_noise = p.log_noise.clone();
        q.log_lengthscale = p.log_lengthscale.clone();
        q.raw_cuts = p.raw_cuts.clone();
        if from
            .variational
            .iter()
            .zip(&self.state.variational)
            .all(|(a, b)| a.inducing() == b.inducing())
        {
            self.state.variational = from.variational.clone();
        }
        Ok(())
    }

    /// ELBO on a whole dataset at the current state.
    pub fn elbo(&self, dataset: &ResponseDataset, quadrature_points: usize) -> Result<f64> {
        let objective = Objective::new(quadrature_points, self.free)?;
        objective.elbo(&self.state, dataset.observations(), dataset.len())
    }
}

/// Stable identity of a dataset's observations, used to refuse comparisons
/// across different data.
pub fn data_fingerprint(dataset: &ResponseDataset) -> u64 {
    let mut h = DefaultHasher::new();
    dataset.units().hash(&mut h);
    dataset.items().hash(&mut h);
    dataset.num_levels().hash(&mut h);
    for o in dataset.observations() {
        (o.unit, o.item, o.time.to_bits(), o.response).hash(&mut h);
    }
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub state: ModelState,
    pub elbo_trace: Vec<f64>,
    /// Full-data ELBO at the optimum; the log-evidence approximation.
    pub final_elbo: f64,
    pub data_fingerprint: u64,
    pub num_observations: usize,
}

impl FittedModel {
    /// Per-observation predictive distributions over levels.
    pub fn predict(
        &self,
        observations: &[Observation],
        quadrature_points: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let rule = GaussHermite::new(quadrature_points)?;
        let queries: Vec<Query> = observations
            .iter()
            .map(|o| Query {
                unit: o.unit,
                item: o.item,
                time: o.time,
            })
            .collect();
        predict_responses(&self.state, &rule, &queries)
    }

    pub fn evaluate(
        &self,
        dataset: &ResponseDataset,
        quadrature_points: usize,
    ) -> Result<MetricReport> {
        let preds = self.predict(dataset.observations(), quadrature_points)?;
        let truth: Vec<usize> = dataset.observations().iter().map(|o| o.response).collect();
        accuracy_and_ll(&preds, &truth)
    }
}

/// Runs stochastic variational inference on `model`.
pub fn fit_model(
    model: Model,
    dataset: &ResponseDataset,
    config: &TrainConfig,
) -> Result<FittedModel> {
    let FitOutput {
        state,
        elbo_trace,
        final_elbo,
    } = fit(model.state, dataset.observations(), model.free, config)?;
    Ok(FittedModel {
        spec: model.spec,
        state,
        elbo_trace,
        final_elbo,
        data_fingerprint: data_fingerprint(dataset),
        num_observations: dataset.len(),
    })
}

/// Stage one of the informative-prior workflow: fits the nomothetic model
/// with `K` factors and returns its population loadings with the fit.
pub fn fit_population_prior(
    dataset: &ResponseDataset,
    num_factors: usize,
    link: Link,
    config: &TrainConfig,
) -> Result<(DMatrix<f64>, FittedModel)> {
    if dataset.is_empty() {
        return Err(Error::Data(
            "cannot estimate population loadings from an empty dataset".into(),
        ));
    }
    let spec = ModelSpec {
        link,
        ..ModelSpec::for_variant(Variant::Nom, num_factors, dataset.num_levels())
    };
    let fitted = fit_model(build_model(&spec, dataset, None, config)?, dataset, config)?;
    Ok((fitted.state.params.w_pop.clone(), fitted))
}

/// Fits one variant end to end. Variants with frozen population loadings
/// first fit the nomothetic model of matching rank (unless `prior` is given)
/// and start from its optimum; the stage-one fit is returned alongside.
pub fn fit_variant(
    spec: &ModelSpec,
    dataset: &ResponseDataset,
    prior: Option<&DMatrix<f64>>,
    config: &TrainConfig,
) -> Result<(FittedModel, Option<FittedModel>)> {
    if !spec.needs_prior() || prior.is_some() {
        let model = build_model(spec, dataset, prior, config)?;
        return Ok((fit_model(model, dataset, config)?, None));
    }
    let (w_pop, stage_one) = fit_population_prior(dataset, spec.num_factors, spec.link, config)?;
    let mut model = build_model(spec, dataset, Some(&w_pop), config)?;
    model.warm_start(&stage_one.state)?;
    Ok((fit_model(model, dataset, config)?, Some(stage_one)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// ELBO-based log evidence.
    pub log_evidence: f64,
    /// `log_evidence - log_evidence(reference)`.
    pub log_bayes_factor: f64,
    pub prior_weight: f64,
    pub posterior_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// ELBO-based `log BF(a vs b)`.
    pub fn log_bayes_factor(&self, a: usize, b: usize) -> f64 {
        self.rows[a].log_evidence - self.rows[b].log_evidence
    }
}

/// Compares models fitted on the same observations. The first model is the
/// reference; `prior_weights` defaults to uniform.
pub fn bayes_factor_table(
    models: &[(String, f64, u64)],
    prior_weights: Option<&[f64]>,
) -> Result<ComparisonTable> {
    if models.is_empty() {
        return Err(Error::Comparison("no models to compare".into()));
    }
    if let Some((label, _, _)) = models.iter().find(|m| m.2 != models[0].2) {
        return Err(Error::Comparison(format!(
            "{label} was fitted on different observations than {}",
            models[0].0
        )));
    }
    let priors: Vec<f64> = match prior_weights {
        None => vec![1.0 / models.len() as f64; models.len()],
        Some(w) => {
            let sum: f64 = w.iter().sum();
            if w.len() != models.len() || w.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-9
            {
                return Err(Error::Config(
                    "prior model weights must be a probability vector".into(),
                ));
            }
            w.to_vec()
        }
    };
    let logits: Vec<f64> = models
        .iter()
        .zip(&priors)
        .map(|((_, e, _), p)| p.ln() + e)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let reference = models[0].1;
    let rows = models
        .iter()
        .zip(&priors)
        .zip(&logits)
        .map(|(((label, e, _), p), l)| ComparisonRow {
            label: label.clone(),
            log_evidence: *e,
            log_bayes_factor: e - reference,
            prior_weight: *p,
            posterior_weight: (l - log_norm).exp(),
        })
        .collect();
    Ok(ComparisonTable {
        reference: models[0].0.clone(),
        rows,
    })
}

/// [`bayes_factor_table`] over fitted models, labelled by variant.
pub fn compare_fitted(
    models: &[&FittedModel],
    prior_weights: Option<&[f64]>,
) -> Result<ComparisonTable> {
    let entries: Vec<(String, f64, u64)> = models
        .iter()
        .map(|m| {
            (
                m.spec.variant.label().to_string(),
                m.final_elbo,
                m.data_fingerprint,
            )
        })
        .collect();
    bayes_factor_table(&entries, prior_weights)
}

/// `D^{-1/2} K D^{-1/2}`.
pub fn correlation_from_covariance(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d: Vec<f64> = (0..k.nrows()).map(|i| k[(i, i)]).collect();
    if let Some(i) = d.iter().position(|x| !(*x > 0.0)) {
        return Err(Error::Numerical(format!(
            "task covariance has non-positive diagonal entry {i}"
        )));
    }
    let s: Vec<f64> = d.iter().map(|x| x.sqrt()).collect();
    Ok(DMatrix::from_fn(k.nrows(), k.ncols(), |a, b| {
        if a == b {
            1.0
        } else {
            k[(a, b)] / (s[a] * s[b])
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Unit(usize),
    Population,
}

/// Task correlation matrix of one unit, or of the population kernel.
pub fn estimated_task_correlation(state: &ModelState, scope: Scope) -> Result<DMatrix<f64>> {
    let k = match scope {
        Scope::Unit(i) if i < state.params.num_units() => state.params.task_kernel(i),
        Scope::Unit(i) => return Err(Error::Data(format!("unit index {i} out of range"))),
        Scope::Population => state.params.population_task_kernel(),
    };
    correlation_from_covariance(&k)
}
