//! `arbor`: command-line front end for search, training, reward models,
//! diversity metrics and experiments.

mod commands;
mod diversity_input;

use std::path::PathBuf;
use std::process::ExitCode;

use arbor_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "arbor",
    version,
    about = "Multi-agent tree search and training on synthetic tasks"
)]
pub struct Cli {
    /// TOML config file; missing keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for parallel searches.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search a task set and write one trace per task plus a summary.
    Search(SearchArgs),
    /// Run training rollouts through the dispatcher and write the update log.
    Train(TrainArgs),
    /// Reward-model data, training, evaluation and final selection.
    Rm {
        #[command(subcommand)]
        action: RmAction,
    },
    /// Diversity metrics over searched solutions.
    Diversity(DiversityArgs),
    /// Train and evaluate one configuration.
    Experiment,
    /// Run several modes at equal compute and summarize.
    Compare(CompareArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Feedback {
    Binary,
    Structured,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Task-set file (JSON lines); generated from the environment when absent.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Tasks to generate when `--tasks` is absent.
    #[arg(long, default_value_t = 20)]
    pub num_tasks: usize,
    /// TOML file whose `[agents]` tables replace the configured agents.
    #[arg(long)]
    pub agents: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_enum)]
    pub depth_guidance: Option<OnOff>,
    #[arg(long, value_enum)]
    pub feedback: Option<Feedback>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum UpdateModeArg {
    Inline,
    Async,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = UpdateModeArg::Async)]
    pub updates: UpdateModeArg,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    Bt,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum RmAction {
    /// Search training tasks and write pointwise examples and pairs.
    Build {
        #[arg(long, default_value_t = 200)]
        num_tasks: usize,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Fit reward models on a dataset written by `rm build`.
    Train {
        /// Directory holding `examples.jsonl` and `pairs.jsonl`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LossArg::Both)]
        loss: LossArg,
    },
    /// Benchmark metrics of a model on a dataset's examples.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare reward-model selection with last-passing selection.
    Select {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 200)]
        num_tasks: usize,
        #[arg(long)]
        budget: Option<usize>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Passk,
    Aec,
    Dak,
    Ea,
    Naudc,
    Gvendi,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    /// Identical bit strings.
    Exact,
    /// Identical pass/fail pattern on the public tests.
    Public,
}

#[derive(Args, Debug)]
pub struct DiversityArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Trace files or directories written by `search`, cluster CSVs
    /// (`task_id,solution_id,cluster`) or vector CSVs (`task_id,kind,v0,...`).
    #[arg(long = "in", required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Use only vector rows of this kind.
    #[arg(long)]
    pub kind: Option<String>,
    /// Equivalence used to cluster trace solutions without a cluster file.
    #[arg(long, value_enum, default_value_t = OracleArg::Exact)]
    pub oracle: OracleArg,
    /// `K` for pass@k and DA@K.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0.5)]
    pub eps: f64,
    #[arg(long, default_value_t = 2)]
    pub min_pts: usize,
    #[arg(long, default_value_t = 64)]
    pub proj_dim: usize,
    /// Seed of the G-Vendi projection.
    #[arg(long, default_value_t = 0)]
    pub proj_seed: u64,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Modes to run; `single` runs once per configured agent.
    #[arg(long, value_delimiter = ',', default_value = "single,homo,heter")]
    pub modes: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
