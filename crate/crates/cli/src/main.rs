//! `rest`: dataset synthesis, training, evaluation, backtests, gradient
//! checks and ablations from one TOML config.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rest_core::model::Variant;

use config::{ConfigError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "rest", version, about = "Relational event-driven stock trend forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    hops: Option<usize>,
    /// Portfolio sizes, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    topk: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic market (events, prices, relations, truth.json).
    SynthGen,
    /// Train and save the best-validation checkpoint.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the test range: predictions.jsonl and metrics.json.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Top-k simulation for every configured k.
    Backtest {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trade on an existing predictions.jsonl instead of a checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Finite-difference check of the configured model's gradients.
    Gradcheck,
    /// Variant, hop-distance and context comparisons over the configured seeds.
    Ablate,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let overrides = Overrides {
        seed: cli.seed,
        variant: cli.variant,
        hops: cli.hops,
        topk: cli.topk,
        out: cli.out,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let needs_data = !matches!(cli.command, Command::SynthGen);
    cfg.validate(needs_data)?;
    let default_ckpt = || cfg.out.join("checkpoint.bin");
    match cli.command {
        Command::SynthGen => commands::synth_gen(&cfg)?,
        Command::Train { checkpoint } => commands::train_cmd(&cfg, &checkpoint.unwrap_or_else(default_ckpt))?,
        Command::Evaluate { checkpoint } => commands::evaluate_cmd(&cfg, &checkpoint.unwrap_or_else(default_ckpt))?,
        Command::Backtest {
            checkpoint,
            predictions,
        } => commands::backtest_cmd(&cfg, &checkpoint.unwrap_or_else(default_ckpt), predictions.as_deref())?,
        Command::Gradcheck => {
            if !commands::gradcheck_cmd(&cfg)? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ablate => commands::ablate_cmd(&cfg)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<rest_core::Error>() {
            if e.is_numerical() {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
