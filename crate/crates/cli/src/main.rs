mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use amoclust::eval::{Method, Track, DEFAULT_RESTARTS};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Amortized clustering of tabular data.
#[derive(Parser, Debug)]
#[command(name = "amoclust", version)]
struct Cli {
    /// Base random seed (defaults to 0; for `train` it overrides the config seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to AMOCLUST_THREADS, then to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic labelled datasets from the prior.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a per-step log.
    Train(TrainArgs),
    /// Benchmark the model and baselines on a directory of labelled datasets.
    Eval(EvalArgs),
    /// Cluster one CSV file with a trained model.
    Cluster(ClusterArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PriorChoice {
    Gmm,
    Zeus,
    Mixed,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "mixed")]
    pub prior: PriorChoice,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub d_min: Option<usize>,
    #[arg(long)]
    pub d_max: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Upper bound on the targeted maximum pairwise overlap.
    #[arg(long)]
    pub omega_cap: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON training configuration.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration: desk or paper.
    #[arg(long)]
    pub preset: Option<String>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step log; defaults to train_log.csv next to the checkpoint.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint; required when `model` is among the methods.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of `<name>.csv` datasets with a `label` column.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "model,kmeans,gmm,sgmm")]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "known_k,inferred_k")]
    pub tracks: Vec<Track>,
    /// Output directory for the result tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Restarts per baseline fit.
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    pub restarts: usize,
    /// Largest K a baseline may select; defaults to the model's K_max, else 10.
    #[arg(long)]
    pub k_max: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with a header row; a trailing `label` column is ignored.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of clusters; inferred when omitted.
    #[arg(long)]
    pub k: Option<usize>,
    /// Assignment CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("AMOCLUST_THREADS") {
            Ok(v) => Some(v.trim().parse().with_context(|| format!("AMOCLUST_THREADS={v:?} is not a count"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("thread count must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads(cli.threads)?;
    let seed = cli.seed;
    match cli.command {
        Command::Gen(a) => commands::gen(&a, seed.unwrap_or(0)),
        Command::Train(a) => commands::train(&a, seed),
        Command::Eval(a) => commands::eval(&a, seed.unwrap_or(0)),
        Command::Cluster(a) => commands::cluster(&a),
        Command::Gradcheck => return commands::gradcheck(seed.unwrap_or(0)),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
