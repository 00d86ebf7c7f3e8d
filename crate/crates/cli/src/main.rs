use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ipgp::pipeline::{run_pipeline, Command, Outcome, RunConfig};
use ipgp::{Error, Result};

/// Idiographic Gaussian process factor models for longitudinal ordinal data.
#[derive(Parser)]
#[command(name = "ipgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate a synthetic study: train/test CSVs and a ground-truth sidecar.
    Simulate(Flags),
    /// Fit one or more model variants.
    Fit(Flags),
    /// Predict responses with a saved model.
    Predict(Flags),
    /// Fit several variants and tabulate Bayes factors.
    Compare(Flags),
    /// Cluster the units of a saved model by task correlation.
    Cluster(Flags),
    /// Run the multi-seed simulation study and check its orderings.
    ReproduceSimStudy(Flags),
}

#[derive(Args)]
struct Flags {
    /// Flat key=value config, or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Long-format CSV with header unit_id,item_id,time,response.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out CSV for the random protocol.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// item_id,trait CSV.
    #[arg(long)]
    traits: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variant(s), comma separated: IPGP, IPGP-NOM, IPGP-IND, IPGP-LOW, IPGP-NP.
    #[arg(long)]
    model: Option<String>,
    /// Saved model.json (predict, cluster).
    #[arg(long)]
    fitted: Option<PathBuf>,
    #[arg(long)]
    factors: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    link: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// random | forecast | loto.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    train_days: Option<usize>,
    #[arg(long)]
    horizon_days: Option<usize>,
    /// Frozen population loadings CSV (factor,<item ids>).
    #[arg(long)]
    prior_loadings: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Number of seeds for the simulation study.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Extra dotted overrides, e.g. --set train.learning_rate=0.01.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Flags {
    /// Flags as dotted config overrides, applied after the config file.
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let num = |n: Option<usize>| n.map(|n| n.to_string());
        let mut pairs: Vec<(&str, Option<String>)> = vec![
            ("data.path", path(&self.data)),
            ("data.test", path(&self.test_data)),
            ("data.traits", path(&self.traits)),
            ("data.levels", num(self.levels)),
            ("out", path(&self.out)),
            ("model.variants", self.model.clone()),
            ("model.fitted", path(&self.fitted)),
            ("model.factors", num(self.factors)),
            ("model.link", self.link.clone()),
            ("model.prior_loadings", path(&self.prior_loadings)),
            ("seed", self.seed.map(|s| s.to_string())),
            ("threads", num(self.threads)),
            ("eval.protocol", self.protocol.clone()),
            ("eval.train_days", num(self.train_days)),
            ("eval.horizon_days", num(self.horizon_days)),
            ("cluster.k", num(self.clusters)),
            ("study.num_seeds", num(self.seeds)),
            ("train.epochs", num(self.epochs)),
        ];
        pairs.retain(|(_, v)| v.is_some());
        let mut out: Vec<(String, String)> = pairs
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v.unwrap()))
            .collect();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            out.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        Ok(out)
    }
}

fn run(command: Command, flags: &Flags) -> Result<Outcome> {
    let mut config = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply(&flags.overrides()?)?;
    if let Some(n) = config.threads {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?;
    }
    run_pipeline(command, config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match &cli.command {
        Sub::Simulate(f) => (Command::Simulate, f),
        Sub::Fit(f) => (Command::Fit, f),
        Sub::Predict(f) => (Command::Predict, f),
        Sub::Compare(f) => (Command::Compare, f),
        Sub::Cluster(f) => (Command::Cluster, f),
        Sub::ReproduceSimStudy(f) => (Command::ReproduceSimStudy, f),
    };
    match run(command, flags) {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if outcome.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("ipgp {command}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
