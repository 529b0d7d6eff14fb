use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;
mod settings;

use settings::HyperFlags;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Detect erroneous triples in a knowledge graph.
#[derive(Parser, Debug)]
#[command(name = "triplecheck", version)]
struct Cli {
    /// `key=value` hyperparameter file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a typed synthetic graph.
    Synth(SynthArgs),
    /// Print entity, relation and triple counts and the mean in-degree.
    Stats(StatsArgs),
    /// Append corrupted triples and write error labels.
    Inject(InjectArgs),
    /// Sample the two neighbor views of every triple.
    BuildViews(ViewsArgs),
    /// Train the encoder and write a checkpoint.
    Train(TrainArgs),
    /// Rank triples by confidence.
    Score(ScoreArgs),
    /// Precision and recall at K of a ranking.
    Eval(EvalArgs),
    /// Metrics over a grid of one hyperparameter.
    Sweep(SweepArgs),
    /// Compare model variants.
    Ablate(AblateArgs),
    /// Rank triples with a trained embedding baseline.
    Baseline(BaselineArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub entities: usize,
    #[arg(long, default_value_t = 20)]
    pub relations: usize,
    #[arg(long, default_value_t = 9500)]
    pub triples: usize,
    #[arg(long, default_value_t = 10)]
    pub types: usize,
    #[arg(long, default_value_t = 5)]
    pub groups: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub graph: PathBuf,
}

#[derive(Args, Debug)]
pub struct InjectArgs {
    /// Clean graph, one `head<TAB>relation<TAB>tail` per line.
    #[arg(long)]
    pub graph: PathBuf,
    /// Fraction of the output that is corrupted.
    #[arg(long)]
    pub ratio: f64,
    /// uniform or same-position.
    #[arg(long, default_value = "same-position")]
    pub mode: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Args, Debug)]
pub struct ViewsArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Neighbors per triple; defaults to the average neighborhood size.
    #[arg(long)]
    pub fan_out: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub views: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration loss and timing records.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub views: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Defaults to the value stored in the checkpoint.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ranking: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Comma-separated fractions of the ranking.
    #[arg(long, value_delimiter = ',', default_values_t = triplecheck::DEFAULT_K_GRID)]
    pub k: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub views: PathBuf,
    /// mu, lambda or gamma.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values; defaults to the standard grid.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
    #[arg(long)]
    pub seed: u64,
    /// Runs per point, with seeds `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 1)]
    pub repeat: u64,
    #[arg(long, value_delimiter = ',', default_values_t = triplecheck::DEFAULT_K_GRID)]
    pub k: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub views: PathBuf,
    /// Comma-separated variants (full, var_concat, var_lstm, var_local,
    /// var_global); defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub repeat: u64,
    #[arg(long, value_delimiter = ',', default_values_t = triplecheck::DEFAULT_K_GRID)]
    pub k: Vec<f64>,
    /// Mean and median metrics per variant.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics of every run.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// transe, distmult or complex.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => settings::read_config(p)?,
        None => settings::ConfigMap::new(),
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Inject(a) => commands::inject(&a),
        Command::BuildViews(a) => commands::build_views(&a, &config),
        Command::Train(a) => commands::train(&a, &config),
        Command::Score(a) => commands::score(&a, &config),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a, &config),
        Command::Ablate(a) => commands::ablate(&a, &config),
        Command::Baseline(a) => commands::baseline(&a, &config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
