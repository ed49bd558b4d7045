//! `clear`: single entry point for the context-learning pipeline.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "clear",
    version,
    about = "Learn task-specific context for LLM agents from their own execution history"
)]
struct Cli {
    /// Pipeline configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the base seed (also applied to training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the collection worker-pool width.
    #[arg(long, global = true)]
    concurrency: Option<usize>,

    /// Redirect all pipeline paths under this directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate MiniShop tasks into the configured tasks file.
    GenTasks {
        #[arg(long, default_value_t = 20)]
        count: u32,
        #[arg(long, default_value = "hard")]
        difficulty: String,
        #[arg(long, default_value = "train")]
        split: String,
        /// Seed of the first task; task i uses start_seed + i.
        #[arg(long, default_value_t = 0)]
        start_seed: u64,
    },
    /// Run every task m times through the execution agent and archive the
    /// rewarded trajectories. Resumable.
    Collect,
    /// Reflect over trajectory subsets and write guidance records.
    Reflect,
    /// Assemble, split, and export the SFT dataset plus CAM artifacts
    /// (template library, retrieval store).
    ExportSft,
    /// Optimize the template policy against the frozen execution agent.
    Train,
    /// One-shot inference: print the augmented task for one task id.
    Infer {
        #[arg(long)]
        task_id: String,
    },
    /// Evaluate one method and write its report.
    Eval {
        /// Override the configured CAM kind (none|endpoint|retrieval|template_policy).
        #[arg(long)]
        method: Option<String>,
        /// Evaluate only this split of the tasks file (train|test|all).
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Compare report files and write a summary.
    Compare {
        /// Report files produced by `eval`.
        reports: Vec<PathBuf>,
    },
    /// Inspect a trajectory archive (a traces directory or a .traj.ndrec file).
    Inspect {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, default_value = "stat")]
        kind: String,
        #[arg(long)]
        pattern: Option<String>,
        #[arg(long, default_value_t = 50)]
        limit: usize,
        /// File name (head/tail) or file.json#/pointer (field).
        #[arg(long)]
        path: Option<String>,
    },
    /// Run the gradient finite-difference check and invariant smoke suite.
    Check,
}

fn effective_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => config::load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    if let Some(concurrency) = cli.concurrency {
        config.concurrency = concurrency.max(1);
    }
    if let Some(out) = &cli.out {
        config.paths.tasks = out.join("tasks.task.ndrec");
        config.paths.archives = out.join("archives");
        config.paths.datasets = out.join("datasets");
        config.paths.checkpoints = out.join("checkpoints");
        config.paths.reports = out.join("reports");
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.print_defaults {
        print!("{}", config::print_config(&PipelineConfig::default()));
        return Ok(());
    }
    let Some(command) = &cli.command else {
        // No subcommand is a usage error.
        use clap::CommandFactory;
        Cli::command().print_help().ok();
        std::process::exit(2);
    };
    let config = effective_config(&cli)?;
    match command {
        Command::GenTasks {
            count,
            difficulty,
            split,
            start_seed,
        } => commands::gen_tasks(&config, *count, difficulty, split, *start_seed),
        Command::Collect => commands::collect(&config),
        Command::Reflect => commands::reflect(&config),
        Command::ExportSft => commands::export_sft(&config),
        Command::Train => commands::train(&config),
        Command::Infer { task_id } => commands::infer(&config, task_id),
        Command::Eval { method, split } => commands::eval(&config, method.as_deref(), split),
        Command::Compare { reports } => commands::compare(&config, reports),
        Command::Inspect {
            archive,
            kind,
            pattern,
            limit,
            path,
        } => commands::inspect(archive, kind, pattern.clone(), *limit, path.clone()),
        Command::Check => commands::check(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
