//! Run configuration and the end-to-end workflows behind the command line:
//! simulate, fit, predict, compare, cluster and the simulation study.
//!
//! Every artifact is written in a fixed order with shortest round-trip float
//! formatting, so identical configurations give byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ingest_csv, ingest_trait_map, Observation, ResponseDataset};
use crate::error::{Error, Result};
use crate::metrics::{kmeans_cmd, residual_profile, ClusterResult, MetricReport};
use crate::models::{
    build_model, compare_fitted, estimated_task_correlation, fit_model, ComparisonTable,
    FittedModel, ModelSpec, Scope, Variant,
};
use crate::ordinal::Link;
use crate::reproduction::{check_bands, reproduce_sim_study, CriterionCheck, StudyConfig};
use crate::simulation::{forecast_split, leave_one_trait_out_splits, simulate, SimulationConfig};
use crate::svi::TrainConfig;

/// Stream of the root seed used for random train/test splits of real data.
const SPLIT_STREAM: u64 = 3;
/// Per-seed runtime budget of the simulation study, in seconds.
pub const STUDY_SECONDS_PER_SEED: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Fit,
    Predict,
    Compare,
    Cluster,
    ReproduceSimStudy,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Compare => "compare",
            Command::Cluster => "cluster",
            Command::ReproduceSimStudy => "reproduce-sim-study",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Random observation split, or an explicit test file.
    #[default]
    Random,
    /// Train on the first days, test on the following horizon.
    Forecast,
    /// Leave one trait out.
    Loto,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format response CSV.
    pub path: Option<PathBuf>,
    /// Optional held-out CSV for the random protocol.
    pub test: Option<PathBuf>,
    /// Optional `item_id,trait` CSV.
    pub traits: Option<PathBuf>,
    /// Number of response levels; inferred from the data when unset.
    pub levels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Variants to fit; empty means the command's default.
    pub variants: Vec<Variant>,
    pub factors: usize,
    pub link: Link,
    /// Frozen population loadings (`factor,<item ids>` CSV).
    pub prior_loadings: Option<PathBuf>,
    /// Saved `model.json` used by predict and cluster.
    pub fitted: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variants: Vec::new(),
            factors: 5,
            link: Link::Logit,
            prior_loadings: None,
            fitted: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Training share of the random split when no test file is given.
    pub train_fraction: f64,
    pub train_days: Option<usize>,
    pub horizon_days: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Random,
            train_fraction: 0.8,
            train_days: None,
            horizon_days: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Number of clusters; clustering is skipped during fits when unset.
    pub k: Option<usize>,
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: None,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub num_seeds: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        Self { num_seeds: 5 }
    }
}

/// Fully resolved run configuration. The output directory is not part of
/// the serialized form so that reruns into another directory produce
/// identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Root seed; drives simulation, training, splits and clustering.
    pub seed: u64,
    /// Worker threads; all cores when unset.
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
    pub simulation: SimulationConfig,
    pub study: StudySection,
    #[serde(skip)]
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            cluster: ClusterConfig::default(),
            train: TrainConfig::default(),
            simulation: SimulationConfig::default(),
            study: StudySection::default(),
            out: PathBuf::from("out"),
        }
    }
}

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_flat_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "config line {}: expected key=value, found '{line}'",
                n + 1
            ))
        })?;
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        pairs.push((key.trim().to_owned(), value.to_owned()));
    }
    Ok(pairs)
}

fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

fn coerce(current: &Value, raw: &str) -> Value {
    match current {
        Value::String(_) => Value::String(raw.to_owned()),
        Value::Array(_) if !raw.trim_start().starts_with('[') => {
            if raw.trim().is_empty() {
                Value::Array(Vec::new())
            } else {
                Value::Array(raw.split(',').map(|s| scalar(s.trim())).collect())
            }
        }
        _ => scalar(raw),
    }
}

impl RunConfig {
    /// Applies dotted `key=value` overrides, e.g. `train.learning_rate=0.05`.
    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, pairs: &[(K, V)]) -> Result<()> {
        let out = self.out.clone();
        let mut tree = serde_json::to_value(&*self)?;
        let mut new_out = None;
        for (key, raw) in pairs {
            let (key, raw) = (key.as_ref(), raw.as_ref());
            if key == "out" {
                new_out = Some(PathBuf::from(raw));
                continue;
            }
            let mut slot = &mut tree;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
            }
            if slot.is_object() {
                return Err(Error::Config(format!("config key '{key}' names a section")));
            }
            *slot = coerce(slot, raw);
            // validate each key on its own so errors name the culprit
            serde_json::from_value::<RunConfig>(tree.clone())
                .map_err(|e| Error::Config(format!("{key}={raw}: {e}")))?;
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        self.out = new_out.unwrap_or(out);
        Ok(())
    }

    /// Reads a flat `key=value` file, a JSON run configuration, or a
    /// manifest written by a previous run.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let value = match value.get("config") {
                Some(inner) => inner.clone(),
                None => value,
            };
            return serde_json::from_value(value)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())));
        }
        let mut config = Self::default();
        config.apply(&parse_flat_config(&text)?)?;
        Ok(config)
    }

    /// Fills command defaults, pushes the root seed into every component and
    /// validates.
    pub fn resolve(&mut self, command: Command) -> Result<()> {
        if self.model.variants.is_empty() {
            self.model.variants = match command {
                Command::Compare => vec![Variant::Ipgp, Variant::Nom],
                _ => vec![Variant::Ipgp],
            };
        }
        let mut seen = Vec::new();
        for v in &self.model.variants {
            if seen.contains(v) {
                return Err(Error::Config(format!("model {v} requested twice")));
            }
            seen.push(*v);
        }
        if command == Command::Compare && self.model.variants.len() < 2 {
            return Err(Error::Config("compare needs at least two models".into()));
        }
        self.train.seed = self.seed;
        self.simulation.seed = self.seed;
        self.train.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be positive".into()));
        }
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train fraction {} outside (0, 1]",
                self.eval.train_fraction
            )));
        }
        if self.cluster.k == Some(0) || self.cluster.restarts == 0 {
            return Err(Error::Config(
                "clustering needs k >= 1 and at least one restart".into(),
            ));
        }
        match command {
            Command::Simulate | Command::ReproduceSimStudy => self.simulation.validate()?,
            Command::Fit | Command::Compare => {
                require(&self.data.path, "data.path")?;
            }
            Command::Predict => {
                require(&self.data.path, "data.path")?;
                require(&self.model.fitted, "model.fitted")?;
            }
            Command::Cluster => {
                require(&self.model.fitted, "model.fitted")?;
                if self.cluster.k.is_none() {
                    return Err(Error::Config("cluster needs cluster.k".into()));
                }
            }
        }
        for p in [
            &self.data.path,
            &self.data.test,
            &self.data.traits,
            &self.model.prior_loadings,
            &self.model.fitted,
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn require(p: &Option<PathBuf>, key: &str) -> Result<()> {
    match p {
        Some(_) => Ok(()),
        None => Err(Error::Config(format!("{key} is required"))),
    }
}

/// Written next to every run's artifacts; loading it as `--config` replays
/// the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
}

/// A fitted model together with the vocabularies it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub units: Vec<String>,
    pub items: Vec<String>,
    pub num_levels: usize,
    pub quadrature_points: usize,
    pub trait_map: Option<BTreeMap<String, String>>,
    pub fitted: FittedModel,
}

impl SavedModel {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// What a run produced beyond its files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outcome {
    /// Study criteria; empty for other commands.
    pub checks: Vec<CriterionCheck>,
}

impl Outcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Resolves `config` for `command`, runs it and writes its artifacts under
/// `config.out`.
pub fn run_pipeline(command: Command, mut config: RunConfig) -> Result<Outcome> {
    config.resolve(command)?;
    fs::create_dir_all(&config.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", config.out.display())))?;
    let outcome = match command {
        Command::Simulate => run_simulate(&config)?,
        Command::Fit | Command::Compare => run_fit(&config)?,
        Command::Predict => run_predict(&config)?,
        Command::Cluster => run_cluster(&config)?,
        Command::ReproduceSimStudy => run_study(&config)?,
    };
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION").to_owned(),
        seed: config.seed,
        config: config.clone(),
    };
    write_json(&config.out.join("manifest.json"), &manifest)?;
    Ok(outcome)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Keeps file names portable.
fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_matrix_csv(
    path: &Path,
    corner: &str,
    rows: &[String],
    cols: &[String],
    m: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(std::iter::once(corner).chain(cols.iter().map(String::as_str)))?;
    for (r, label) in rows.iter().enumerate() {
        let values: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        w.write_record(std::iter::once(label.as_str()).chain(values.iter().map(String::as_str)))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `factor,<item ids>` loadings CSV, reordering its columns to
/// `items`.
pub fn read_loadings_csv<P: AsRef<Path>>(path: P, items: &[String]) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .skip(1)
        .map(str::to_owned)
        .collect();
    let columns: Vec<usize> = items
        .iter()
        .map(|i| {
            header.iter().position(|h| h == i).ok_or_else(|| {
                Error::Data(format!(
                    "{}: no loading column for item {i}",
                    path.display()
                ))
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        let line = n + 2;
        let values: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Data(format!(
                    "{} line {line}: non-numeric loading",
                    path.display()
                ))
            })?;
        if values.len() != header.len() {
            return Err(Error::Data(format!(
                "{} line {line}: ragged row",
                path.display()
            )));
        }
        rows.push(columns.iter().map(|&c| values[c]).collect::<Vec<_>>());
    }
    Ok(DMatrix::from_fn(rows.len(), items.len(), |r, c| rows[r][c]))
}

/// Re-indexes `other` onto the vocabularies of `reference`.
pub fn align_dataset(
    reference: &ResponseDataset,
    other: &ResponseDataset,
) -> Result<ResponseDataset> {
    align_to(
        reference.units(),
        reference.items(),
        reference.num_levels(),
        other,
    )
    .and_then(|ds| match reference.trait_map() {
        Some(t) => ds.with_trait_map(t.clone()),
        None => Ok(ds),
    })
}

fn align_to(
    units: &[String],
    items: &[String],
    levels: usize,
    other: &ResponseDataset,
) -> Result<ResponseDataset> {
    let find = |vocab: &[String], id: &str, what: &str| {
        vocab
            .binary_search_by(|v| v.as_str().cmp(id))
            .map_err(|_| Error::Data(format!("{what} {id} was not seen in training")))
    };
    let observations = other
        .observations()
        .iter()
        .map(|o| {
            Ok(Observation {
                unit: find(units, &other.units()[o.unit], "unit")?,
                item: find(items, &other.items()[o.item], "item")?,
                ..*o
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ResponseDataset::new(units.to_vec(), items.to_vec(), levels, observations)
}

fn run_simulate(config: &RunConfig) -> Result<Outcome> {
    let sim = simulate(&config.simulation)?;
    sim.train.write_csv(config.out.join("train.csv"))?;
    sim.test.write_csv(config.out.join("test.csv"))?;
    write_json(&config.out.join("ground_truth.json"), &sim.truth)?;
    Ok(Outcome::default())
}

fn load_dataset(config: &RunConfig) -> Result<ResponseDataset> {
    let path = config
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("data.path is required".into()))?;
    let ds = ingest_csv(path, config.data.levels)?;
    match &config.data.traits {
        Some(t) => ds.with_trait_map(ingest_trait_map(t)?),
        None => Ok(ds),
    }
}

struct Split {
    name: Option<String>,
    train: ResponseDataset,
    test: Option<ResponseDataset>,
}

fn random_split(
    ds: &ResponseDataset,
    fraction: f64,
    seed: u64,
) -> Result<(ResponseDataset, ResponseDataset)> {
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let mut in_train = vec![false; n];
    for &k in &order[..(fraction * n as f64).round() as usize] {
        in_train[k] = true;
    }
    let obs = ds.observations();
    let pick = |side: bool| {
        (0..n)
            .filter(|&k| in_train[k] == side)
            .map(|k| obs[k])
            .collect::<Vec<_>>()
    };
    Ok((
        ds.with_observations(pick(true))?,
        ds.with_observations(pick(false))?,
    ))
}

fn splits(config: &RunConfig, ds: &ResponseDataset) -> Result<Vec<Split>> {
    match config.eval.protocol {
        Protocol::Random => {
            if let Some(test) = &config.data.test {
                let test = align_dataset(ds, &ingest_csv(test, Some(ds.num_levels()))?)?;
                return Ok(vec![Split {
                    name: None,
                    train: ds.clone(),
                    test: Some(test),
                }]);
            }
            if config.eval.train_fraction >= 1.0 {
                return Ok(vec![Split {
                    name: None,
                    train: ds.clone(),
                    test: None,
                }]);
            }
            let (train, test) = random_split(ds, config.eval.train_fraction, config.seed)?;
            Ok(vec![Split {
                name: None,
                train,
                test: Some(test),
            }])
        }
        Protocol::Forecast => {
            let days = config
                .eval
                .train_days
                .ok_or_else(|| Error::Config("forecast protocol needs eval.train_days".into()))?;
            let (train, test) = forecast_split(ds, days, config.eval.horizon_days)?;
            Ok(vec![Split {
                name: None,
                train,
                test: Some(test),
            }])
        }
        Protocol::Loto => {
            let traits = ds
                .trait_map()
                .ok_or_else(|| Error::Config("loto protocol needs data.traits".into()))?;
            let folds = leave_one_trait_out_splits(ds, traits)?;
            if folds.iter().all(|f| f.degenerate) {
                return Err(Error::Config("loto needs at least two traits".into()));
            }
            Ok(folds
                .into_iter()
                .filter(|f| !f.degenerate)
                .map(|f| Split {
                    name: Some(format!("fold_{}", file_safe(&f.held_out))),
                    train: f.train,
                    test: Some(f.test),
                })
                .collect())
        }
    }
}

/// Fits the requested variants on one training set. The nomothetic fit is
/// shared between an explicit `IPGP-NOM` request and the prior stage of
/// variants with frozen population loadings.
pub fn fit_variants(
    variants: &[Variant],
    num_factors: usize,
    link: Link,
    train: &ResponseDataset,
    prior: Option<&DMatrix<f64>>,
    config: &TrainConfig,
) -> Result<Vec<FittedModel>> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut nomothetic: BTreeMap<usize, FittedModel> = BTreeMap::new();
    let mut nom = |k: usize| -> Result<FittedModel> {
        if let Some(f) = nomothetic.get(&k) {
            return Ok(f.clone());
        }
        let spec = ModelSpec {
            link,
            ..ModelSpec::for_variant(Variant::Nom, k, train.num_levels())
        };
        let fitted = fit_model(build_model(&spec, train, None, config)?, train, config)?;
        nomothetic.insert(k, fitted.clone());
        Ok(fitted)
    };
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let spec = ModelSpec {
            link,
            ..ModelSpec::for_variant(v, num_factors, train.num_levels())
        };
        spec.validate()?;
        let fitted = if v == Variant::Nom {
            nom(spec.num_factors)?
        } else if spec.needs_prior() {
            match prior.filter(|w| w.nrows() == spec.num_factors) {
                Some(w) => fit_model(build_model(&spec, train, Some(w), config)?, train, config)?,
                None => {
                    let stage_one = nom(spec.num_factors)?;
                    let mut model =
                        build_model(&spec, train, Some(&stage_one.state.params.w_pop), config)?;
                    model.warm_start(&stage_one.state)?;
                    fit_model(model, train, config)?
                }
            }
        } else {
            fit_model(build_model(&spec, train, None, config)?, train, config)?
        };
        out.push(fitted);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct ModelMetrics {
    model: Variant,
    final_elbo: f64,
    train: MetricReport,
    test: Option<MetricReport>,
}

#[derive(Debug, Clone, Serialize)]
struct SplitMetrics {
    split: Option<String>,
    train_observations: usize,
    test_observations: Option<usize>,
    models: Vec<ModelMetrics>,
}

#[derive(Debug, Clone, Serialize)]
struct MetricsFile {
    protocol: Protocol,
    splits: Vec<SplitMetrics>,
}

fn run_fit(config: &RunConfig) -> Result<Outcome> {
    let ds = load_dataset(config)?;
    let prior = match &config.model.prior_loadings {
        Some(p) => Some(read_loadings_csv(p, ds.items())?),
        None => None,
    };
    let q = config.train.quadrature_points;
    let mut all = Vec::new();
    for split in splits(config, &ds)? {
        let split_dir = match &split.name {
            Some(name) => config.out.join(name),
            None => config.out.clone(),
        };
        fs::create_dir_all(&split_dir)?;
        let fitted = fit_variants(
            &config.model.variants,
            config.model.factors,
            config.model.link,
            &split.train,
            prior.as_ref(),
            &config.train,
        )?;
        let mut models = Vec::new();
        for f in &fitted {
            let dir = if fitted.len() > 1 {
                split_dir.join(f.spec.variant.label())
            } else {
                split_dir.clone()
            };
            fs::create_dir_all(&dir)?;
            write_model_artifacts(&dir, &split.train, f, q)?;
            if let Some(k) = config.cluster.k {
                let saved = saved_model(&split.train, f, q);
                write_clusters(
                    &dir,
                    &saved,
                    k,
                    config.cluster.restarts,
                    config.seed,
                    saved.trait_map.as_ref(),
                )?;
            }
            models.push(ModelMetrics {
                model: f.spec.variant,
                final_elbo: f.final_elbo,
                train: f.evaluate(&split.train, q)?,
                test: split.test.as_ref().map(|t| f.evaluate(t, q)).transpose()?,
            });
        }
        if fitted.len() > 1 {
            let refs: Vec<&FittedModel> = fitted.iter().collect();
            let table: ComparisonTable = compare_fitted(&refs, None)?;
            write_json(&split_dir.join("comparison.json"), &table)?;
        }
        all.push(SplitMetrics {
            split: split.name.clone(),
            train_observations: split.train.len(),
            test_observations: split.test.as_ref().map(ResponseDataset::len),
            models,
        });
    }
    write_json(
        &config.out.join("metrics.json"),
        &MetricsFile {
            protocol: config.eval.protocol,
            splits: all,
        },
    )?;
    Ok(Outcome::default())
}

fn saved_model(
    train: &ResponseDataset,
    fitted: &FittedModel,
    quadrature_points: usize,
) -> SavedModel {
    SavedModel {
        units: train.units().to_vec(),
        items: train.items().to_vec(),
        num_levels: train.num_levels(),
        quadrature_points,
        trait_map: train.trait_map().cloned(),
        fitted: fitted.clone(),
    }
}

fn write_model_artifacts(
    dir: &Path,
    train: &ResponseDataset,
    fitted: &FittedModel,
    q: usize,
) -> Result<()> {
    write_json(&dir.join("model.json"), &saved_model(train, fitted, q))?;

    let mut w = csv::Writer::from_path(dir.join("elbo_trace.csv"))?;
    w.write_record(["step", "elbo"])?;
    for (step, e) in fitted.elbo_trace.iter().enumerate() {
        w.write_record([(step + 1).to_string(), e.to_string()])?;
    }
    w.flush()?;

    let params = &fitted.state.params;
    let factors: Vec<String> = (1..=params.w_pop.nrows()).map(|k| k.to_string()).collect();
    write_matrix_csv(
        &dir.join("loadings_population.csv"),
        "factor",
        &factors,
        train.items(),
        &params.w_pop,
    )?;
    write_matrix_csv(
        &dir.join("loadings_individual.csv"),
        "unit_id",
        train.units(),
        train.items(),
        &params.w_ind,
    )?;
    for (i, unit) in train.units().iter().enumerate() {
        let r = estimated_task_correlation(&fitted.state, Scope::Unit(i))?;
        let name = format!("correlation_unit_{}.csv", file_safe(unit));
        write_matrix_csv(&dir.join(name), "item_id", train.items(), train.items(), &r)?;
    }
    let pop = estimated_task_correlation(&fitted.state, Scope::Population)?;
    write_matrix_csv(
        &dir.join("correlation_population.csv"),
        "item_id",
        train.items(),
        train.items(),
        &pop,
    )?;
    Ok(())
}

fn run_predict(config: &RunConfig) -> Result<Outcome> {
    let saved = SavedModel::load(config.model.fitted.as_ref().expect("resolved"))?;
    let raw = ingest_csv(
        config.data.path.as_ref().expect("resolved"),
        Some(saved.num_levels),
    )?;
    let ds = align_to(&saved.units, &saved.items, saved.num_levels, &raw)?;
    let preds = saved
        .fitted
        .predict(ds.observations(), saved.quadrature_points)?;

    let mut w = csv::Writer::from_path(config.out.join("predictions.csv"))?;
    let mut header = vec![
        "unit_id".to_owned(),
        "item_id".into(),
        "time".into(),
        "response".into(),
        "predicted".into(),
    ];
    header.extend((1..=saved.num_levels).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for (o, p) in ds.observations().iter().zip(&preds) {
        // ties resolve to the lower level, as in the accuracy metric
        let predicted = p
            .iter()
            .enumerate()
            .fold(0, |best, (c, &v)| if v > p[best] { c } else { best })
            + 1;
        let mut row = vec![
            saved.units[o.unit].clone(),
            saved.items[o.item].clone(),
            o.time.to_string(),
            o.response.to_string(),
            predicted.to_string(),
        ];
        row.extend(p.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;

    let truth: Vec<usize> = ds.observations().iter().map(|o| o.response).collect();
    let report = crate::metrics::accuracy_and_ll(&preds, &truth)?;
    write_json(
        &config.out.join("metrics.json"),
        &BTreeMap::from([("predict", report)]),
    )?;
    Ok(Outcome::default())
}

#[derive(Debug, Clone, Serialize)]
struct UnitAssignment {
    unit: String,
    cluster: usize,
}

#[derive(Debug, Clone, Serialize)]
struct ClustersFile {
    k: usize,
    model: Variant,
    total_within: f64,
    history: Vec<f64>,
    assignments: Vec<UnitAssignment>,
    /// Row-major centroid correlation matrices.
    centroids: Vec<Vec<Vec<f64>>>,
    /// Centroid minus population correlation, row-major.
    residuals: Vec<Vec<Vec<f64>>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Clusters the units of a fitted model by their task correlations.
pub fn cluster_units(
    saved: &SavedModel,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterResult> {
    let state = &saved.fitted.state;
    let mats: Vec<DMatrix<f64>> = (0..state.params.num_units())
        .map(|i| estimated_task_correlation(state, Scope::Unit(i)))
        .collect::<Result<_>>()?;
    let mut result = kmeans_cmd(&mats, k, restarts, seed)?;
    result.attach_residuals(&estimated_task_correlation(state, Scope::Population)?)?;
    Ok(result)
}

fn write_clusters(
    dir: &Path,
    saved: &SavedModel,
    k: usize,
    restarts: usize,
    seed: u64,
    traits: Option<&BTreeMap<String, String>>,
) -> Result<()> {
    let result = cluster_units(saved, k, restarts, seed)?;
    let file = ClustersFile {
        k,
        model: saved.fitted.spec.variant,
        total_within: result.total_within,
        history: result.history.clone(),
        assignments: saved
            .units
            .iter()
            .zip(&result.assignments)
            .map(|(u, &c)| UnitAssignment {
                unit: u.clone(),
                cluster: c,
            })
            .collect(),
        centroids: result.centroids.iter().map(rows).collect(),
        residuals: result.residuals.iter().map(rows).collect(),
    };
    write_json(&dir.join("clusters.json"), &file)?;

    // without a trait map every item is its own trait
    let item_traits: Vec<String> = saved
        .items
        .iter()
        .map(|i| match traits {
            Some(map) => map
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Data(format!("item {i} has no trait label"))),
            None => Ok(i.clone()),
        })
        .collect::<Result<_>>()?;
    let population = estimated_task_correlation(&saved.fitted.state, Scope::Population)?;
    let mut w = csv::Writer::from_path(dir.join("residual_profiles.csv"))?;
    w.write_record(["cluster", "trait_row", "trait_col", "residual"])?;
    for (c, centroid) in result.centroids.iter().enumerate() {
        let profile = residual_profile(centroid, &population, &item_traits)?;
        for (a, ta) in profile.traits.iter().enumerate() {
            for (b, tb) in profile.traits.iter().enumerate() {
                w.write_record([
                    c.to_string(),
                    ta.clone(),
                    tb.clone(),
                    profile.matrix[(a, b)].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn run_cluster(config: &RunConfig) -> Result<Outcome> {
    let saved = SavedModel::load(config.model.fitted.as_ref().expect("resolved"))?;
    let traits = match &config.data.traits {
        Some(p) => Some(ingest_trait_map(p)?),
        None => saved.trait_map.clone(),
    };
    let k = config.cluster.k.expect("resolved");
    write_clusters(
        &config.out,
        &saved,
        k,
        config.cluster.restarts,
        config.seed,
        traits.as_ref(),
    )?;
    Ok(Outcome::default())
}

fn run_study(config: &RunConfig) -> Result<Outcome> {
    let study = StudyConfig {
        num_seeds: config.study.num_seeds,
        base_seed: config.seed,
        simulation: config.simulation.clone(),
        train: config.train.clone(),
    };
    let result = reproduce_sim_study(&study, Some(&config.out))?;
    let mut checks = check_bands(&result.seeds, STUDY_SECONDS_PER_SEED);
    checks.extend(result.checks);
    write_json(&config.out.join("checks.json"), &checks)?;
    Ok(Outcome { checks })
}
