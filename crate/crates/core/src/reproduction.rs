//! Desk-scale rerun of the simulation study: every model variant on several
//! simulated datasets, summarized as mean and standard error per variant,
//! with the expected orderings checked.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cmd, MetricReport};
use crate::models::{estimated_task_correlation, FittedModel, Scope, Variant};
use crate::ordinal::Link;
use crate::pipeline::fit_variants;
use crate::simulation::{simulate, GroundTruth, SimulationConfig};
use crate::svi::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub num_seeds: usize,
    /// Seeds are `base_seed, base_seed + 1, ...`; each drives both the
    /// simulation and the training of that replicate.
    pub base_seed: u64,
    pub simulation: SimulationConfig,
    pub train: TrainConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            num_seeds: 5,
            base_seed: 0,
            simulation: SimulationConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub seed: u64,
    pub variant: Variant,
    pub train: MetricReport,
    pub test: MetricReport,
    /// Mean over units of CMD(estimated, true task correlation).
    pub cmd: f64,
    pub final_elbo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub variants: Vec<VariantResult>,
    /// Wall-clock seconds for simulating and fitting every variant.
    pub runtime_secs: f64,
}

impl SeedResult {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Mean and standard error; the error is NaN for a single replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return Self { mean, se: f64::NAN };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub variant: Variant,
    pub train_acc: Summary,
    pub train_ll: Summary,
    pub test_acc: Summary,
    pub test_ll: Summary,
    pub cmd: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub seeds: Vec<SeedResult>,
    pub rows: Vec<StudyRow>,
    pub checks: Vec<CriterionCheck>,
}

impl StudyResult {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Mean CMD between a model's unit correlations and the true ones.
pub fn mean_unit_cmd(model: &FittedModel, truth: &GroundTruth) -> Result<f64> {
    let n = truth.task_correlation.len();
    let mut total = 0.0;
    for (unit, r_true) in truth.task_correlation.iter().enumerate() {
        total += cmd(
            &estimated_task_correlation(&model.state, Scope::Unit(unit))?,
            r_true,
        )?;
    }
    Ok(total / n as f64)
}

/// Simulates one replicate and fits every variant on its training split.
pub fn run_seed(config: &StudyConfig, seed: u64) -> Result<SeedResult> {
    let start = Instant::now();
    let sim = simulate(&SimulationConfig {
        seed,
        ..config.simulation.clone()
    })?;
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let q = train.quadrature_points;
    let k = config.simulation.num_factors;
    let fitted = fit_variants(&Variant::ALL, k, Link::Logit, &sim.train, None, &train)?;
    let mut variants = Vec::new();
    for (v, model) in Variant::ALL.into_iter().zip(&fitted) {
        variants.push(VariantResult {
            seed,
            variant: v,
            train: model.evaluate(&sim.train, q)?,
            test: model.evaluate(&sim.test, q)?,
            cmd: mean_unit_cmd(model, &sim.truth)?,
            final_elbo: model.final_elbo,
        });
    }
    Ok(SeedResult {
        seed,
        variants,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn summarize(seeds: &[SeedResult]) -> Vec<StudyRow> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let col = |f: &dyn Fn(&VariantResult) -> f64| {
                Summary::of(
                    &seeds
                        .iter()
                        .filter_map(|s| s.get(v))
                        .map(f)
                        .collect::<Vec<_>>(),
                )
            };
            StudyRow {
                variant: v,
                train_acc: col(&|r| r.train.accuracy),
                train_ll: col(&|r| r.train.mean_log_lik),
                test_acc: col(&|r| r.test.accuracy),
                test_ll: col(&|r| r.test.mean_log_lik),
                cmd: col(&|r| r.cmd),
            }
        })
        .collect()
}

const ABLATIONS: [Variant; 4] = [Variant::Nom, Variant::Ind, Variant::Low, Variant::Np];

/// The ordering criteria of the study.
pub fn check_orderings(seeds: &[SeedResult]) -> Vec<CriterionCheck> {
    let n = seeds.len();
    let full = |s: &SeedResult| s.get(Variant::Ipgp).cloned().expect("full model present");
    let needed = if n >= 5 { n - n / 5 } else { n };
    let mut checks = Vec::new();

    let wins = |better: &dyn Fn(&VariantResult, &VariantResult) -> bool| {
        seeds
            .iter()
            .filter(|s| {
                ABLATIONS
                    .iter()
                    .all(|&a| s.get(a).is_some_and(|r| better(&full(s), r)))
            })
            .count()
    };
    let acc_wins = wins(&|f, r| f.test.accuracy > r.test.accuracy);
    let cmd_wins = wins(&|f, r| f.cmd < r.cmd);
    checks.push(CriterionCheck {
        name: "full model beats every ablation on test accuracy".into(),
        passed: acc_wins >= needed,
        detail: format!("{acc_wins} of {n} seeds (need {needed})"),
    });
    checks.push(CriterionCheck {
        name: "full model beats every ablation on CMD".into(),
        passed: cmd_wins >= needed,
        detail: format!("{cmd_wins} of {n} seeds (need {needed})"),
    });

    let mean_cmd = Summary::of(&seeds.iter().map(|s| full(s).cmd).collect::<Vec<_>>()).mean;
    checks.push(CriterionCheck {
        name: "full model mean CMD < 0.3".into(),
        passed: mean_cmd < 0.3,
        detail: format!("mean CMD {mean_cmd:.4}"),
    });
    let gaps: Vec<f64> = seeds
        .iter()
        .map(|s| s.get(Variant::Ind).map_or(f64::NAN, |r| r.cmd) - full(s).cmd)
        .collect();
    checks.push(CriterionCheck {
        name: "IPGP-IND CMD exceeds full model by >= 0.15 in every seed".into(),
        passed: gaps.iter().all(|g| *g >= 0.15),
        detail: format!("gaps {}", fmt_list(&gaps)),
    });

    let bf: Vec<f64> = seeds
        .iter()
        .map(|s| full(s).final_elbo - s.get(Variant::Nom).map_or(f64::NAN, |r| r.final_elbo))
        .collect();
    checks.push(CriterionCheck {
        name: "log BF(IPGP vs IPGP-NOM) > 0 in every seed".into(),
        passed: bf.iter().all(|b| *b > 0.0),
        detail: format!("log BF {}", fmt_list(&bf)),
    });

    let floor = -(5f64.ln());
    let worst = seeds
        .iter()
        .flat_map(|s| s.variants.iter().map(|r| r.test.mean_log_lik))
        .fold(f64::INFINITY, f64::min);
    checks.push(CriterionCheck {
        name: "every model's test LL exceeds log(1/5)".into(),
        passed: worst > floor,
        detail: format!("worst test LL {worst:.4}"),
    });
    checks
}

/// Accuracy, log-likelihood and runtime bands for the full model.
pub fn check_bands(seeds: &[SeedResult], max_secs_per_seed: f64) -> Vec<CriterionCheck> {
    let full: Vec<&VariantResult> = seeds.iter().filter_map(|s| s.get(Variant::Ipgp)).collect();
    let acc = Summary::of(&full.iter().map(|r| r.test.accuracy).collect::<Vec<_>>()).mean;
    let ll = Summary::of(&full.iter().map(|r| r.test.mean_log_lik).collect::<Vec<_>>()).mean;
    let slowest = seeds.iter().map(|s| s.runtime_secs).fold(0.0, f64::max);
    vec![
        CriterionCheck {
            name: "full model test accuracy > 0.80".into(),
            passed: acc > 0.80,
            detail: format!("mean test accuracy {acc:.4}"),
        },
        CriterionCheck {
            name: "full model test mean LL > -0.5".into(),
            passed: ll > -0.5,
            detail: format!("mean test LL {ll:.4}"),
        },
        CriterionCheck {
            name: "runtime per seed within budget".into(),
            passed: slowest < max_secs_per_seed,
            detail: format!("slowest seed {slowest:.1}s (budget {max_secs_per_seed}s)"),
        },
    ]
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_summary(s: Summary) -> String {
    if s.se.is_nan() {
        format!("{:.4},", s.mean)
    } else {
        format!("{:.4},{:.4}", s.mean, s.se)
    }
}

/// Table with one row per variant: mean and standard error of every metric.
/// Error columns are empty for a single seed.
pub fn table_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from(
        "model,train_acc,train_acc_se,train_ll,train_ll_se,test_acc,test_acc_se,test_ll,test_ll_se,cmd,cmd_se\n",
    );
    for r in rows {
        let cells = [r.train_acc, r.train_ll, r.test_acc, r.test_ll, r.cmd].map(fmt_summary);
        out.push_str(&format!("{},{}\n", r.variant, cells.join(",")));
    }
    out
}

pub fn per_seed_csv(seeds: &[SeedResult]) -> String {
    let mut out = String::from("seed,model,train_acc,train_ll,test_acc,test_ll,cmd,elbo\n");
    for s in seeds {
        for r in &s.variants {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}\n",
                s.seed,
                r.variant,
                r.train.accuracy,
                r.train.mean_log_lik,
                r.test.accuracy,
                r.test.mean_log_lik,
                r.cmd,
                r.final_elbo
            ));
        }
    }
    out
}

/// Runs every seed (in parallel), summarizes and checks the orderings. When
/// `out_dir` is given, writes `table1_desk.csv`, `per_seed.csv`,
/// `checks.json` and `manifest.json` there.
pub fn reproduce_sim_study(config: &StudyConfig, out_dir: Option<&Path>) -> Result<StudyResult> {
    if config.num_seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let seeds: Vec<SeedResult> = (0..config.num_seeds as u64)
        .into_par_iter()
        .map(|k| run_seed(config, config.base_seed + k))
        .collect::<Result<_>>()?;
    let rows = summarize(&seeds);
    let checks = check_orderings(&seeds);
    let result = StudyResult {
        config: config.clone(),
        seeds,
        rows,
        checks,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("table1_desk.csv"), table_csv(&result.rows))?;
        fs::write(dir.join("per_seed.csv"), per_seed_csv(&result.seeds))?;
        fs::write(
            dir.join("checks.json"),
            serde_json::to_string_pretty(&result.checks)?,
        )?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(config)?,
        )?;
    }
    Ok(result)
}
