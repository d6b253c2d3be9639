//! `genotrait` command-line front end.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Ctx;
use crate::error::CliError;

pub const DATA_DIR_ENV: &str = "GENOTRAIT_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "genotrait", version, about = "Genome-conditioned trait prediction toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run config; defaults are used for omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `<data dir>/runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Root for default inputs and run directories.
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = "genotrait-data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scores predictions against a prompt/truth file.
    Eval {
        /// Prompt JSONL with truths.
        dataset: PathBuf,
        /// JSONL of {strain_id, field, answer}.
        predictions: PathBuf,
    },
    /// Reward breakdown and token-advantage preview for one trajectory dump.
    Reward {
        trajectory: PathBuf,
        /// Truth as a canonical answer object, e.g. {"gram_stain":"negative"}.
        #[arg(long)]
        truth: PathBuf,
        /// Training progress in [0, 1] for the tool-count schedule.
        #[arg(long, default_value_t = 0.0)]
        progress: f64,
        /// Sequence advantage assumed for the preview.
        #[arg(long, default_value_t = 1.0)]
        advantage: f64,
    },
    /// Warm start and GRPO on the synthetic gene-dependent task.
    TrainToy,
    /// Metabolic tool observation for one configuration id.
    Gem {
        config_id: u32,
        /// Model set JSON; defaults to `<data dir>/models.json`, then the built-in set.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Retrieval tool observation for one genome handle.
    Rag {
        handle: String,
        /// Store JSONL; defaults to `<data dir>/store.jsonl`.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Phenotype fields to report (repeatable); defaults to every schema field.
        #[arg(long = "field")]
        fields: Vec<String>,
        #[arg(long, default_value_t = genotrait::embedstore::DEFAULT_TOP_K)]
        k: usize,
    },
    /// Selects, retries and repairs candidate trajectories.
    Distill {
        /// Directory of candidate bundle JSONL files.
        candidates: PathBuf,
    },
    /// Config inspection.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Prints the effective config as JSON.
    Show,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    }
    let ctx = Ctx::new(cli.global);
    match cli.command {
        Command::Eval { dataset, predictions } => commands::eval::run(&ctx, &dataset, &predictions),
        Command::Reward { trajectory, truth, progress, advantage } => {
            commands::reward::run(&ctx, &trajectory, &truth, progress, advantage)
        }
        Command::TrainToy => commands::train::run(&ctx),
        Command::Gem { config_id, models } => commands::tools::gem(&ctx, config_id, models),
        Command::Rag { handle, store, fields, k } => commands::tools::rag(&ctx, &handle, store, fields, k),
        Command::Distill { candidates } => commands::distill::run(&ctx, &candidates),
        Command::Config { action: ConfigAction::Show } => commands::show_config(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
