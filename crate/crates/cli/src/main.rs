//! `ztprune` command-line front end.

mod commands;
mod config;
mod error;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;
use crate::output::{report_path, write_atomic};

#[derive(Parser)]
#[command(name = "ztprune", version, about = "Training-free token pruning on ViT attention traces")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Directory for report and trace files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum ClsMode {
    #[default]
    Classification,
    Uniform,
}

impl From<ClsMode> for ztprune::ClsBoostMode {
    fn from(m: ClsMode) -> Self {
        match m {
            ClsMode::Classification => ztprune::ClsBoostMode::Classification,
            ClsMode::Uniform => ztprune::ClsBoostMode::Uniform,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate planted synthetic traces.
    Synth(SynthArgs),
    /// Lint trace files.
    Validate(ValidateArgs),
    /// Rank the tokens of each block.
    Rank(RankArgs),
    /// Run a pruning schedule over traces.
    Simulate(SimulateArgs),
    /// FLOPs breakdown for a geometry and optional schedule.
    Flops(FlopsArgs),
    /// Divergence of truncated WPR runs from a long reference run.
    Converge(ConvergeArgs),
    /// Random search over pruning schedules under a FLOPs budget.
    Search(SearchArgs),
    /// Compare ranking strategies on planted traces.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Geometry preset (deit-t, deit-s, deit-b).
    #[arg(long)]
    pub geometry: Option<String>,
    #[arg(long)]
    pub traces: Option<usize>,
    #[arg(long)]
    pub salient: Option<usize>,
    #[arg(long)]
    pub salience_mass: Option<f64>,
    #[arg(long)]
    pub noise_temp: Option<f64>,
    /// Comma-separated feature tensors: k, q, v, x.
    #[arg(long, value_delimiter = ',')]
    pub tensors: Option<Vec<String>>,
    /// Sharpen attention with depth.
    #[arg(long)]
    pub depth_profile: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value_t = ztprune::trace::READ_ROW_SUM_TOL)]
    pub row_tol: f64,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    pub trace: PathBuf,
    /// Repeatable: wpr:N, cls-attention, average-attention, accumulated-average, random:SEED.
    #[arg(long = "strategy")]
    pub strategies: Vec<String>,
    /// 1-based blocks, comma-separated; all blocks by default.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Vec<usize>,
    /// Only list the top N tokens.
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub cls_mode: ClsMode,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    /// Schedule preset (reference, none) instead of the config's [schedule].
    #[arg(long)]
    pub schedule: Option<String>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long)]
    pub geometry: Option<String>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ConvergeArgs {
    pub trace: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 30])]
    pub iterations: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub reference: usize,
    #[arg(long, value_enum, default_value_t)]
    pub cls_mode: ClsMode,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    /// Earlier search report whose candidates are reused.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Evaluate the reference DeiT-S schedule as an extra trial.
    #[arg(long)]
    pub include_reference: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Trace files with `.truth.json` sidecars; replaces the planted ensemble.
    pub traces: Vec<PathBuf>,
    #[arg(long = "strategy")]
    pub strategies: Vec<String>,
    /// 1-based block to rank.
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Planted ensemble size.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub noise_temp: Option<f64>,
}

fn run(cli: &Cli) -> Result<i32, CliError> {
    if let Some(jobs) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let g = &cli.global;
    let (name, outcome) = match &cli.command {
        Command::Synth(a) => ("synth", commands::synth(g, a)?),
        Command::Validate(a) => ("validate", commands::validate(g, a)?),
        Command::Rank(a) => ("rank", commands::rank(g, a)?),
        Command::Simulate(a) => ("simulate", commands::simulate(g, a)?),
        Command::Flops(a) => ("flops", commands::flops(g, a)?),
        Command::Converge(a) => ("converge", commands::converge(g, a)?),
        Command::Search(a) => ("search", commands::search(g, a)?),
        Command::Bench(a) => ("bench", commands::bench(g, a)?),
    };
    let jsonl = outcome.report.to_jsonl();
    if let Some(dir) = &g.out {
        write_atomic(&report_path(dir, name), jsonl.as_bytes())?;
    }
    let text = match g.format {
        Format::Json => jsonl,
        Format::Table => outcome.report.to_table(),
    };
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    stdout.flush()?;
    Ok(outcome.code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("ztprune: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
