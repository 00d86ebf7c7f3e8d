//! Synthetic longitudinal ordinal data with known factor structure, and the
//! evaluation splits (random, forecast horizon, leave-one-trait-out,
//! planned-missing).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Observation, ResponseDataset};
use crate::error::{Error, Result};
use crate::kernels::rbf_time_kernel;
use crate::linalg::cholesky_jittered;
use crate::ordinal::{ordinal_probs, Link, OrdinalThresholds};

/// Emission cuts used for five-level data.
pub const TRUE_CUTS_FIVE: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

// independent random streams of one simulation seed
const STREAM_PATHS: u64 = 0;
const STREAM_LOADINGS: u64 = 1;
const STREAM_EMISSION: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub num_units: usize,
    pub num_periods: usize,
    pub num_factors: usize,
    pub num_items: usize,
    pub num_levels: usize,
    pub lengthscale_pool: Vec<f64>,
    pub dominant_loading: f64,
    pub off_loading_range: (f64, f64),
    pub idio_range: (f64, f64),
    /// Fraction of each loading object zeroed; the same fraction of the
    /// surviving entries is sign-flipped.
    pub sparsity_fraction: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            num_units: 10,
            num_periods: 30,
            num_factors: 5,
            num_items: 20,
            num_levels: 5,
            lengthscale_pool: vec![10.0, 20.0, 30.0],
            dominant_loading: 3.0,
            off_loading_range: (-1.0, 1.0),
            idio_range: (-1.0, 1.0),
            sparsity_fraction: 0.5,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_units == 0
            || self.num_periods == 0
            || self.num_factors == 0
            || self.num_items == 0
        {
            return err("simulation sizes must be positive".into());
        }
        if self.num_items % self.num_factors != 0 {
            return err(format!(
                "{} items do not split into {} blocks",
                self.num_items, self.num_factors
            ));
        }
        if self.num_levels < 2 {
            return err("at least two response levels are required".into());
        }
        if self.lengthscale_pool.is_empty()
            || self
                .lengthscale_pool
                .iter()
                .any(|l| !(*l > 0.0) || !l.is_finite())
        {
            return err("length scale pool must hold positive values".into());
        }
        for (name, (lo, hi)) in [
            ("off-loading", self.off_loading_range),
            ("idiographic", self.idio_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return err(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        for (name, f) in [
            ("sparsity", self.sparsity_fraction),
            ("train", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return err(format!("{name} fraction {f} outside [0, 1]"));
            }
        }
        if !self.dominant_loading.is_finite() {
            return err("dominant loading must be finite".into());
        }
        Ok(())
    }

    /// Emission thresholds: the fixed symmetric cuts for five levels,
    /// otherwise evenly spaced over `[-2, 2]`.
    pub fn true_thresholds(&self) -> OrdinalThresholds {
        if self.num_levels == 5 {
            return OrdinalThresholds::new(TRUE_CUTS_FIVE.to_vec()).expect("increasing");
        }
        let n = self.num_levels - 1;
        let cuts = (0..n)
            .map(|c| {
                if n == 1 {
                    0.0
                } else {
                    -2.0 + 4.0 * c as f64 / (n - 1) as f64
                }
            })
            .collect();
        OrdinalThresholds::new(cuts).expect("increasing")
    }

    pub fn times(&self) -> Vec<f64> {
        (1..=self.num_periods).map(|t| t as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimulationConfig,
    pub lengthscales: Vec<f64>,
    /// Per unit, `K x T` population factor paths.
    pub latent: Vec<DMatrix<f64>>,
    /// Per unit, the idiographic factor path over the `T` periods.
    pub idiographic_paths: Vec<DVector<f64>>,
    /// True population loadings, `K x J`. The generator has no task noise.
    pub w_pop: DMatrix<f64>,
    /// True idiographic loadings, `n x J`.
    pub w_ind: DMatrix<f64>,
    pub thresholds: Vec<f64>,
    /// Per unit, noiseless latent responses `J x T`.
    pub latent_f: Vec<DMatrix<f64>>,
    /// Per unit, correlation of `W_pop' W_pop + w_i w_i'`.
    pub task_correlation: Vec<DMatrix<f64>>,
}

impl GroundTruth {
    /// Re-emits every response from the stored latent values; reproduces the
    /// simulated dataset (train and test together, in generation order).
    pub fn regenerate_responses(&self) -> Result<Vec<Observation>> {
        let thresholds = OrdinalThresholds::new(self.thresholds.clone())?;
        Ok(emit(
            &self.latent_f,
            &thresholds,
            self.config.seed,
            &self.config.times(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub train: ResponseDataset,
    pub test: ResponseDataset,
    pub truth: GroundTruth,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Zeroes `fraction` of the entries, then flips the sign of `fraction` of the
/// survivors, both chosen uniformly at random.
fn sparsify(values: &mut [f64], fraction: f64, rng: &mut ChaCha8Rng) {
    let n = values.len();
    let zeroed = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &k in &order[..zeroed] {
        values[k] = 0.0;
    }
    let survivors = &order[zeroed..];
    let flipped = (fraction * survivors.len() as f64).round() as usize;
    for k in sample(rng, survivors.len(), flipped) {
        values[survivors[k]] = -values[survivors[k]];
    }
}

/// Correlation of a PSD covariance; items with zero variance correlate with
/// nothing and keep a unit diagonal.
pub fn covariance_to_correlation_lenient(k: &DMatrix<f64>) -> DMatrix<f64> {
    let s: Vec<f64> = (0..k.nrows()).map(|i| k[(i, i)].max(0.0).sqrt()).collect();
    DMatrix::from_fn(k.nrows(), k.ncols(), |a, b| {
        if a == b {
            1.0
        } else if s[a] > 0.0 && s[b] > 0.0 {
            k[(a, b)] / (s[a] * s[b])
        } else {
            0.0
        }
    })
}

fn emit(
    latent_f: &[DMatrix<f64>],
    thresholds: &OrdinalThresholds,
    seed: u64,
    times: &[f64],
) -> Vec<Observation> {
    let mut rng = stream(seed, STREAM_EMISSION);
    let mut out = Vec::new();
    for (unit, f) in latent_f.iter().enumerate() {
        for item in 0..f.nrows() {
            for (t, &time) in times.iter().enumerate() {
                let probs = ordinal_probs(f[(item, t)], thresholds, Link::Logit);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut level = probs.len();
                for (c, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        level = c + 1;
                        break;
                    }
                }
                out.push(Observation {
                    unit,
                    item,
                    time,
                    response: level,
                });
            }
        }
    }
    out
}

fn padded_ids(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

/// Draws latent paths, loadings and responses, then splits observations
/// uniformly at random into train and test.
pub fn simulate(config: &SimulationConfig) -> Result<Simulation> {
    config.validate()?;
    let (n, k, j) = (config.num_units, config.num_factors, config.num_items);
    let times = config.times();
    let t_len = times.len();

    let mut rng = stream(config.seed, STREAM_PATHS);
    let mut lengthscales = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    let mut idiographic_paths = Vec::with_capacity(n);
    for _ in 0..n {
        let l = config.lengthscale_pool[rng.random_range(0..config.lengthscale_pool.len())];
        let (chol, _) = cholesky_jittered(&rbf_time_kernel(&times, l)?)?;
        let mut path = || {
            let z = DVector::from_fn(t_len, |_, _| StandardNormal.sample(&mut rng));
            &chol * z
        };
        let mut x = DMatrix::zeros(k, t_len);
        for f in 0..k {
            x.set_row(f, &path().transpose());
        }
        idiographic_paths.push(path());
        latent.push(x);
        lengthscales.push(l);
    }

    let mut rng = stream(config.seed, STREAM_LOADINGS);
    let block = j / k;
    let mut w_pop = DMatrix::from_fn(k, j, |f, item| {
        if item / block == f {
            config.dominant_loading
        } else {
            f64::NAN
        }
    });
    for v in w_pop.iter_mut().filter(|v| v.is_nan()) {
        *v = uniform(&mut rng, config.off_loading_range);
    }
    sparsify(w_pop.as_mut_slice(), config.sparsity_fraction, &mut rng);
    let mut w_ind = DMatrix::zeros(n, j);
    for unit in 0..n {
        let mut w: Vec<f64> = (0..j)
            .map(|_| uniform(&mut rng, config.idio_range))
            .collect();
        sparsify(&mut w, config.sparsity_fraction, &mut rng);
        w_ind.set_row(unit, &DVector::from_vec(w).transpose());
    }

    let latent_f: Vec<DMatrix<f64>> = (0..n)
        .map(|unit| {
            let wi = w_ind.row(unit).transpose();
            w_pop.tr_mul(&latent[unit]) + &wi * idiographic_paths[unit].transpose()
        })
        .collect();
    let task_correlation = (0..n)
        .map(|unit| {
            let wi = w_ind.row(unit).transpose();
            covariance_to_correlation_lenient(&(w_pop.tr_mul(&w_pop) + &wi * wi.transpose()))
        })
        .collect();

    let thresholds = config.true_thresholds();
    let observations = emit(&latent_f, &thresholds, config.seed, &times);
    let mut rng = stream(config.seed, STREAM_SPLIT);
    let mut order: Vec<usize> = (0..observations.len()).collect();
    order.shuffle(&mut rng);
    let n_train = (config.train_fraction * observations.len() as f64).round() as usize;
    let (train_idx, test_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| observations[i]).collect::<Vec<_>>()
    };
    let units = padded_ids("u", n);
    let items = padded_ids("i", j);
    let train = ResponseDataset::new(
        units.clone(),
        items.clone(),
        config.num_levels,
        pick(train_idx),
    )?;
    let test = ResponseDataset::new(units, items, config.num_levels, pick(test_idx))?;

    let truth = GroundTruth {
        config: config.clone(),
        lengthscales,
        latent,
        idiographic_paths,
        w_pop,
        w_ind,
        thresholds: thresholds.cuts().to_vec(),
        latent_f,
        task_correlation,
    };
    Ok(Simulation { train, test, truth })
}

/// Trains on the first `train_days` days and tests on the following
/// `horizon_days`. Day `d` covers `[t0 + d, t0 + d + 1)` with `t0` the
/// floor of the earliest time.
pub fn forecast_split(
    dataset: &ResponseDataset,
    train_days: usize,
    horizon_days: usize,
) -> Result<(ResponseDataset, ResponseDataset)> {
    if train_days == 0 {
        return Err(Error::Config(
            "forecast training window must be at least one day".into(),
        ));
    }
    let obs = dataset.observations();
    let Some(t0) = obs
        .iter()
        .map(|o| o.time)
        .min_by(f64::total_cmp)
        .map(f64::floor)
    else {
        return Err(Error::Data("cannot split an empty dataset".into()));
    };
    let day = |t: f64| (t - t0).floor() as usize;
    let days = obs.iter().map(|o| day(o.time)).max().unwrap_or(0) + 1;
    if days < train_days + horizon_days {
        return Err(Error::Config(format!(
            "data cover {days} days, fewer than {train_days} + {horizon_days}"
        )));
    }
    let train = dataset.filter(|o| day(o.time) < train_days);
    let test = dataset.filter(|o| (train_days..train_days + horizon_days).contains(&day(o.time)));
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraitFold {
    pub held_out: String,
    pub train: ResponseDataset,
    pub test: ResponseDataset,
    /// True when the training side is empty (a single-trait map).
    pub degenerate: bool,
}

/// One fold per trait: its items' observations are the test set.
pub fn leave_one_trait_out_splits(
    dataset: &ResponseDataset,
    trait_map: &BTreeMap<String, String>,
) -> Result<Vec<TraitFold>> {
    let item_trait: Vec<&String> = dataset
        .items()
        .iter()
        .map(|i| {
            trait_map
                .get(i)
                .ok_or_else(|| Error::Data(format!("item {i} has no trait label")))
        })
        .collect::<Result<_>>()?;
    let mut traits: Vec<&String> = item_trait.clone();
    traits.sort();
    traits.dedup();
    Ok(traits
        .into_iter()
        .map(|t| {
            let test = dataset.filter(|o| item_trait[o.item] == t);
            let train = dataset.filter(|o| item_trait[o.item] != t);
            TraitFold {
                held_out: t.clone(),
                degenerate: train.is_empty(),
                train,
                test,
            }
        })
        .collect())
}

/// Planned-missing design: items form consecutive sub-factor groups of
/// `items_per_subfactor`; per (unit, time, group) only `shown` items chosen
/// uniformly at random are kept.
pub fn planned_missing_mask(
    dataset: &ResponseDataset,
    items_per_subfactor: usize,
    shown: usize,
    seed: u64,
) -> Result<ResponseDataset> {
    let j = dataset.num_items();
    if items_per_subfactor == 0 || j % items_per_subfactor != 0 {
        return Err(Error::Config(format!(
            "{j} items do not form groups of {items_per_subfactor}"
        )));
    }
    if shown == 0 || shown > items_per_subfactor {
        return Err(Error::Config(format!(
            "cannot show {shown} of {items_per_subfactor} items"
        )));
    }
    let mut keys: Vec<(usize, f64, usize)> = dataset
        .observations()
        .iter()
        .map(|o| (o.unit, o.time, o.item / items_per_subfactor))
        .collect();
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    keys.dedup_by(|a, b| a.0 == b.0 && a.1.to_bits() == b.1.to_bits() && a.2 == b.2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shown_sets = BTreeMap::new();
    for (unit, time, group) in keys {
        let chosen: Vec<usize> = sample(&mut rng, items_per_subfactor, shown)
            .into_iter()
            .map(|k| group * items_per_subfactor + k)
            .collect();
        shown_sets.insert((unit, time.to_bits(), group), chosen);
    }
    Ok(dataset.filter(|o| {
        shown_sets[&(o.unit, o.time.to_bits(), o.item / items_per_subfactor)].contains(&o.item)
    }))
}
