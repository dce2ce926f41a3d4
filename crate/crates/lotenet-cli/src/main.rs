//! Command-line front end: train, evaluate, predict, inspect and
//! synthesize-data subcommands over a JSON configuration file.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 numerical divergence,
//! 4 shape mismatch between data and model.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;


#[derive(Parser)]
#[command(name = "lotenet", version, about = "Locally orderless tensor network image classifier")]
struct Cli {
    /// Worker threads for tensor kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config; writes best.ltc, history.jsonl and
    /// report.json into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and print a metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// LTNT container path.
        #[arg(long, conflicts_with_all = ["images", "labels"])]
        data: Option<PathBuf>,
        /// IDX image file (paired with --labels).
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
    },
    /// Predict classes for an LTNT container; one line per sample.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Describe a model: per-layer block table and parameter counts.
    Inspect {
        #[arg(long, conflicts_with_all = ["config", "config_template"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "config_template")]
        config: Option<PathBuf>,
        /// Print a full-default config template and exit.
        #[arg(long)]
        config_template: bool,
    },
    /// Generate a synthetic LTNT dataset.
    Synth {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // ignore failure when a pool already exists (tests call main twice)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let result = match cli.command {
        Command::Train { config, out } => commands::cmd_train(&config, &out),
        Command::Evaluate {
            checkpoint,
            data,
            images,
            labels,
        } => commands::cmd_evaluate(&checkpoint, data.as_deref(), images.as_deref(), labels.as_deref()),
        Command::Predict { checkpoint, input } => commands::cmd_predict(&checkpoint, &input),
        Command::Inspect {
            checkpoint,
            config,
            config_template,
        } => commands::cmd_inspect(checkpoint.as_deref(), config.as_deref(), config_template),
        Command::Synth {
            kind,
            count,
            size,
            seed,
            out,
        } => commands::cmd_synth(&kind, count, size, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
