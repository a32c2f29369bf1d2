mod artifacts;
mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cfl::binning::BinScheme;
use clap::{Parser, Subcommand};

use crate::artifacts::ArtifactWriter;
use crate::config::{Estimator, KList, RunConfig};

/// Causal feature learning on tabular data: bin the outcome, estimate
/// P(bin | covariates), cluster the estimates into macrostates and report.
#[derive(Debug, Parser)]
#[command(name = "cfl", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, global = true, env = "CFL_OUT_DIR", default_value = "cfl-out")]
    out_dir: PathBuf,
    /// Worker threads; all cores when unset.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppresses the list of written files.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct DataArgs {
    /// Input CSV; overrides the config.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Requested number of outcome bins.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Cluster counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SchemeArg {
    EqualWidth,
    Quantile,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum EstimatorArg {
    Softmax,
    FrequencyTable,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bin, fit, cluster and profile.
    Pipeline(DataArgs),
    /// Minimum treated share across clusters for several bin counts.
    BinSweep {
        #[command(flatten)]
        data: DataArgs,
        /// Bin counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
    },
    /// Checks on random synthetic models that the observational partition
    /// coarsens the causal one.
    VerifyCct {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Propensity matching, balance and bootstrapped effect.
    Match {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        caliper: Option<f64>,
        /// Runs the pipeline on the matched rows as well.
        #[arg(long)]
        then_pipeline: bool,
    },
    /// Regularity of the cluster pairs of the conditional-distribution graph.
    RegularityAudit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        eps: Option<f64>,
    },
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.input {
            cfg.input = Some(p.clone());
        }
        if let Some(b) = self.bins {
            cfg.binning.bins = b;
        }
        if let Some(s) = self.scheme {
            cfg.binning.scheme = match s {
                SchemeArg::EqualWidth => BinScheme::EqualWidth,
                SchemeArg::Quantile => BinScheme::Quantile,
            };
        }
        if let Some(k) = &self.k {
            cfg.clustering.k = KList::Many(k.clone());
        }
        if let Some(e) = self.estimator {
            cfg.density.estimator = match e {
                EstimatorArg::Softmax => Estimator::Softmax,
                EstimatorArg::FrequencyTable => Estimator::FrequencyTable,
            };
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    let name = match &cli.command {
        Command::Pipeline(data) => {
            data.apply(&mut cfg);
            "pipeline"
        }
        Command::BinSweep { data, sweep } => {
            data.apply(&mut cfg);
            if let Some(s) = sweep {
                cfg.sweep.bins = s.clone();
            }
            "bin-sweep"
        }
        Command::VerifyCct { trials } => {
            if let Some(t) = trials {
                cfg.cct.trials = *t;
            }
            "verify-cct"
        }
        Command::Match {
            data,
            caliper,
            then_pipeline,
        } => {
            data.apply(&mut cfg);
            if caliper.is_some() {
                cfg.matching.caliper = *caliper;
            }
            cfg.matching.then_pipeline |= then_pipeline;
            "match"
        }
        Command::RegularityAudit { data, eps } => {
            data.apply(&mut cfg);
            if let Some(e) = eps {
                cfg.regularity.eps = *e;
            }
            "regularity-audit"
        }
    };
    let seed = cfg.seed()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .context("building thread pool")?;
    let mut w = ArtifactWriter::new(&cli.out_dir, name, &cfg, Some(seed), cli.quiet)?;
    pool.install(|| match cli.command {
        Command::Pipeline(_) => commands::pipeline::command(&cfg, seed, &mut w),
        Command::BinSweep { .. } => commands::sweep::command(&cfg, seed, &mut w),
        Command::VerifyCct { .. } => commands::cct::command(&cfg, seed, &mut w),
        Command::Match { .. } => commands::matching::command(&cfg, seed, &mut w),
        Command::RegularityAudit { .. } => commands::regularity::command(&cfg, seed, &mut w),
    })?;
    w.finish()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
