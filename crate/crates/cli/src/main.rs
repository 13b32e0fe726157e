mod commands;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "l2r", version, about = "Learned search-space reduction for TSP and CVRP")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "L2R_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Write random instances.
    Generate(GenerateArgs),
    /// Train both policies and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Construct a solution with a trained checkpoint.
    Solve(SolveArgs),
    /// Refine a solution by destroy-and-repair.
    Improve(ImproveArgs),
    /// Compare against exact or heuristic references and write report tables.
    Evaluate(EvaluateArgs),
    /// Print checkpoint metadata.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value = "tsp")]
    pub kind: String,
    /// Cities (TSP) or customers (CVRP).
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub capacity: Option<f64>,
    /// uniform, cluster, explosion or implosion.
    #[arg(long, default_value = "uniform")]
    pub pattern: String,
    /// json or benchmark (TSPLIB/CVRPLIB text).
    #[arg(long, default_value = "json")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// TOML or JSON file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting preset when no config file is given: desk or full.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_reduction_bias: bool,
    #[arg(long)]
    pub no_local_bias: bool,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines metrics log (default: checkpoint path with .metrics.jsonl).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SolveArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// greedy or sample.
    #[arg(long, default_value = "greedy")]
    pub mode: String,
    /// Candidate-set size (default: the checkpoint's).
    #[arg(long)]
    pub k: Option<usize>,
    /// Static pruning ratio (default: the checkpoint's).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// learned or dssr.
    #[arg(long, default_value = "learned")]
    pub reducer: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Binary sparse-graph cache; read if present, written otherwise.
    #[arg(long)]
    pub graph_cache: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Overlay the candidate set of this construction step on the SVG.
    #[arg(long)]
    pub svg_step: Option<usize>,
    /// Record wall-clock time in the solution file.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct ImproveArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long)]
    pub solution: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub prc_iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub prc_max_destroy: usize,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long)]
    pub timings: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    /// Reference solver: held-karp (TSP, n <= 18) or nearest-neighbor.
    #[arg(long, default_value = "held-karp")]
    pub oracle: String,
    /// Evaluate these instance files instead of generated ones.
    #[arg(long, num_args = 1..)]
    pub instances: Vec<PathBuf>,
    #[arg(long, default_value = "tsp")]
    pub kind: String,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Adds learned-policy rows (greedy objective and optimality ratio).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Also run the exact pruning experiment for these k values.
    #[arg(long, value_delimiter = ',')]
    pub pruned_k: Vec<usize>,
    /// Output directory for report.csv / report.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub timings: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
