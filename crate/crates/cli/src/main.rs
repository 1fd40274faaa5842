use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dsbn_cli::commands;
use dsbn_cli::config::ExperimentConfig;
use dsbn_cli::{CliError, CliResult};

/// Domain adaptation experiments with domain-specific batch normalization.
#[derive(Parser)]
#[command(name = "dsbn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured two-stage experiment for every seed.
    Train {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for run artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list overriding the config.
        #[arg(long)]
        seeds: Option<String>,
        /// Override max iterations of both stages.
        #[arg(long)]
        iters: Option<usize>,
        /// Also dump the generated datasets as CSV.
        #[arg(long)]
        export_data: bool,
    },
    /// Run the four stage-1/stage-2 normalization combinations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Compare single-source, merged, and separate multi-source training.
    Multisource {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Export penultimate-layer features of a trained checkpoint.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV to embed instead of the configured synthetic data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained checkpoint on the target domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV to evaluate instead of the configured synthetic data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Optional CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_seed_list(s: &str) -> CliResult<Vec<u64>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<u64>()
                .map_err(|_| CliError::config(anyhow::anyhow!("bad seed {part:?} in --seeds")))
        })
        .collect()
}

fn load_config(
    path: &PathBuf,
    seeds: &Option<String>,
    iters: &Option<usize>,
) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(list) = seeds {
        cfg.experiment.seeds = parse_seed_list(list)?;
    }
    if let Some(n) = iters {
        cfg.schedule.max_iters_stage1 = *n;
        cfg.schedule.max_iters_stage2 = *n;
    }
    cfg.validate().map_err(CliError::config)?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train {
            config,
            out,
            seeds,
            iters,
            export_data,
        } => {
            let cfg = load_config(config, seeds, iters)?;
            commands::cmd_train(&cfg, out, *export_data)
        }
        Command::Ablate {
            config,
            out,
            seeds,
            iters,
        } => {
            let cfg = load_config(config, seeds, iters)?;
            commands::cmd_ablate(&cfg, out)
        }
        Command::Multisource {
            config,
            out,
            seeds,
            iters,
        } => {
            let cfg = load_config(config, seeds, iters)?;
            commands::cmd_multisource(&cfg, out)
        }
        Command::ExportEmbeddings {
            checkpoint,
            config,
            data,
            out,
        } => {
            let cfg = load_config(config, &None, &None)?;
            commands::cmd_export_embeddings(checkpoint, &cfg, data.as_deref(), out)
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            out,
        } => {
            let cfg = load_config(config, &None, &None)?;
            commands::cmd_eval(checkpoint, &cfg, data.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
