//! Command-line front end: pointwise inference, simulations, dynamic graphs
//! and null distributions from CSV input.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tvcm_core::graph::Symmetrization;
use tvcm_core::simulate::Method;

use crate::config::FileConfig;
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "tvcm", version, about = "Inference for time-varying coefficient models")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub bandwidth: Option<f64>,
    /// uniform, epanechnikov or triangular.
    #[arg(long, global = true)]
    pub kernel: Option<String>,
    #[arg(long, global = true)]
    pub lambda2: Option<f64>,
    /// `cv`, `recommended[:MULT]` or a positive number.
    #[arg(long, global = true)]
    pub lambda1: Option<String>,
    #[arg(long, global = true)]
    pub xi: Option<f64>,
    #[arg(long, global = true)]
    pub zeta: Option<f64>,
    /// Monte Carlo draws for the null distribution.
    #[arg(long, global = true)]
    pub nmc: Option<usize>,
    /// `iid_known[:SIGMA]`, `iid_estimated` or `banded[:h=H][:rho=R][:c=C]`.
    #[arg(long = "error-model", global = true)]
    pub error_model: Option<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pointwise tests on a regression CSV with columns x1..xp and y.
    Infer {
        #[arg(long)]
        input: PathBuf,
        /// Time points; every interior observation time when absent.
        #[arg(long = "t", value_delimiter = ',')]
        t: Vec<f64>,
    },
    /// Monte Carlo study on synthetic data.
    Simulate {
        #[arg(long)]
        replications: Option<usize>,
        /// proposed, tv_lasso, fp_lasso, non_tv.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Dynamic conditional-dependence graph of a multivariate series.
    Graph {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "t", value_delimiter = ',')]
        t: Vec<f64>,
        /// `or` or `and`.
        #[arg(long)]
        rule: Option<Symmetrization>,
    },
    /// Monte Carlo sample of the minimum p-value under the null.
    Nulldist {
        /// Design CSV; `y` is needed only for banded error models.
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "t")]
        t: f64,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = FileConfig::load(cli.common.config.as_deref())?;
    cfg.apply(&cli.common)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::Config("threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    let out = cli.common.out.as_path();
    pool.install(|| match cli.command {
        Command::Infer { input, t } => commands::infer(&input, &t, &cfg, out),
        Command::Simulate {
            replications,
            methods,
        } => commands::simulate(&cfg, replications, &methods, out),
        Command::Graph { input, t, rule } => {
            if let Some(rule) = rule {
                cfg.graph.rule = rule;
            }
            commands::graph(&input, &t, &cfg, out)
        }
        Command::Nulldist { input, t } => commands::nulldist(&input, t, &cfg, out),
    })
}
