//! `memfof` command-line tool.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Error carrying its exit status: 1 for usage or input problems, 2 for
/// failed internal invariants.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Invariant(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Failure::Invariant(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Invariant(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Invariant(m) => f.write_str(m),
        }
    }
}

impl From<memfof::Error> for Failure {
    fn from(e: memfof::Error) -> Self {
        match e {
            memfof::Error::Diverged(_) | memfof::Error::NotReady(_) => Failure::Invariant(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "memfof", version, about = "Three-frame bidirectional optical flow")]
struct Cli {
    #[command(flatten)]
    run: RunFlags,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    /// Weight file; without it a seeded random model is used
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Refinement iterations [default: 8]
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Ratio of input to correlation resolution
    #[arg(long, global = true, value_parser = ["8", "16", "24"])]
    scale: Option<String>,
    /// Disable global motion aggregation
    #[arg(long, global = true)]
    no_gma: bool,
    /// Run the network on frames resized to twice their size
    #[arg(long, global = true)]
    upscale2x: bool,
    /// Also write colour-coded PNGs of every flow
    #[arg(long, global = true)]
    viz: bool,
    /// Worker threads for per-triplet parallelism
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed; falls back to MEMFOF_SEED, then 0
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value file; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            weights: self.weights.clone(),
            iters: self.iters,
            scale: self.scale.as_deref().map(|s| s.parse().expect("validated by clap")),
            gma: self.no_gma.then_some(false),
            upscale2x: self.upscale2x.then_some(true),
            viz: self.viz.then_some(true),
            jobs: self.jobs,
            seed: self.seed,
            ..Default::default()
        };
        Ok(file.overlay(flags))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate bidirectional flow for every interior frame
    Estimate(commands::EstimateArgs),
    /// Score predicted .flo files against ground truth
    Eval(commands::EvalArgs),
    /// Time the cumulative inference optimisations
    Bench(commands::BenchArgs),
    /// 2D histogram of motion vectors
    Histogram(commands::HistogramArgs),
    /// Train a small model on synthetic data
    TrainToy(commands::TrainArgs),
    /// Run the built-in oracle suite
    Selfcheck,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = cli.run.resolve()?;
    match cli.cmd {
        Command::Estimate(a) => commands::estimate(&a, &cfg),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a, &cfg),
        Command::Histogram(a) => commands::histogram(&a),
        Command::TrainToy(a) => commands::train_toy(&a, &cfg),
        Command::Selfcheck => commands::selfcheck(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
