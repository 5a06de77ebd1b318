//! `c2f` command-line driver.

mod commands;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use c2f_core::config::{apply_overrides, load_config};
use c2f_core::trainer::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "c2f",
    version,
    about = "Coarse-to-fine action quality scoring head"
)]
pub struct Cli {
    /// Run-config JSON document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted config override, e.g. `--set optim.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Run seed; also seeds synthetic data. Defaults to the config's seed (0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel runs for `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic train/test feature files.
    Synth,
    /// Train a model; writes checkpoint.cofk and history.csv.
    Train {
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature file to score; defaults to the checkpoint's test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the composite loss on the toy model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        draws: usize,
    },
    /// Build a simplex ETF and report its deviation from the target Gram matrix.
    VerifyEtf {
        /// Feature dimension; defaults to `model.scoring_dim`.
        #[arg(long)]
        dim: Option<usize>,
        /// Vertex count; defaults to `model.sub_grades`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Spearman correlation of two columns of a delimited text file.
    Srcc { file: PathBuf },
    /// Train once per value of P, G or G'.
    Sweep {
        #[arg(long, value_parser = sweep::SweepParam::parse)]
        param: sweep::SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

pub enum Failure {
    Config(c2f_core::Error),
    Module(&'static str, c2f_core::Error),
    Check(String),
}

impl Failure {
    fn report(&self) -> ExitCode {
        match self {
            Failure::Config(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
            Failure::Module(m, e) => {
                eprintln!("error: {m}: {e}");
                ExitCode::from(1)
            }
            Failure::Check(msg) => {
                eprintln!("check failed: {msg}");
                ExitCode::from(1)
            }
        }
    }
}

pub type CliResult = Result<(), Failure>;

pub trait Context<T> {
    fn ctx(self, module: &'static str) -> Result<T, Failure>;
}

impl<T> Context<T> for c2f_core::Result<T> {
    fn ctx(self, module: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Module(module, e))
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let base = match &cli.config {
        Some(p) => load_config(p).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    let mut sets = cli.set.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
        sets.push(format!("data.synth.seed={seed}"));
    }
    apply_overrides(&base, &sets).map_err(Failure::Config)
}

fn run(cli: Cli) -> CliResult {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg, &cli.out),
        Command::Train { resume } => commands::train(&cfg, &cli.out, resume.as_deref()),
        Command::Eval { checkpoint, data } => commands::eval(checkpoint, data.as_deref()),
        Command::Gradcheck { draws } => commands::gradcheck(&cfg, *draws),
        Command::VerifyEtf { dim, k } => commands::verify_etf(
            &cfg,
            dim.unwrap_or(cfg.model.scoring_dim),
            k.unwrap_or(cfg.model.sub_grades),
        ),
        Command::Srcc { file } => commands::srcc(file),
        Command::Sweep { param, values } => sweep::run(&cfg, *param, values, &cli.out, cli.jobs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
