use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfr_cli::commands;
use dfr_cli::config::RunConfig;
use dfr_cli::workspace::{resolve_root, Workspace, OUT_ENV};
use dfr_core::error::Result;

/// Direct feature reasoning experiments.
///
/// Any `--module.key=value` flag overrides one config key, e.g.
/// `--train.n_tokens=8`.
#[derive(Parser)]
#[command(name = "dfr", version)]
struct Cli {
    /// Output directory (default: $DFR_OUT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config file of `module.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate regions, counties and their embeddings.
    GenWorld,
    /// Generate and verify the benchmark splits.
    GenData,
    /// Build the corpus and pretrain the frozen backbone.
    Pretrain,
    /// Train a projector (and, for ablations, backbone layers).
    Train,
    /// Evaluate one method on the test split.
    Eval {
        #[arg(long, default_value = "dfr")]
        method: String,
        /// Projector checkpoint relative to the output directory.
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Train and evaluate DFR across token counts and strategies.
    Sweep,
    /// Collect results into report.md and CSV files.
    Report,
    /// Print the effective config.
    Config,
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::preset(p)?,
        (None, None) => RunConfig::preset("tiny")?,
    };
    if cli.config.is_some() {
        if let Some(p) = &cli.preset {
            cfg.set("run.preset", p)?;
        }
    }
    for (k, v) in &overrides {
        cfg.set(k, v)?;
    }
    if let Command::Config = cli.command {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let root = resolve_root(cli.out.as_deref());
    let ws = Workspace::new(root);
    let _lock = ws.lock()?;
    log::info!("output {} (override with --out or {OUT_ENV}), config {}", ws.root.display(), &cfg.hash()[..12]);
    match cli.command {
        Command::GenWorld => commands::gen_world(&ws, &cfg),
        Command::GenData => commands::gen_data(&ws, &cfg),
        Command::Pretrain => commands::pretrain(&ws, &cfg),
        Command::Train => commands::train_cmd(&ws, &cfg).map(|tag| println!("train/{tag}")),
        Command::Eval { method, checkpoint } => {
            let results = commands::eval_cmd(&ws, &cfg, &method, checkpoint.as_deref())?;
            for r in results {
                println!("{}\t{}\t{}\t{}\t{}\t{:.4}\t{}", r.experiment, r.method, r.task, r.style, r.metric.as_str(), r.value, r.count);
            }
            Ok(())
        }
        Command::Sweep => commands::sweep_cmd(&ws, &cfg).map(|_| ()),
        Command::Report => commands::report_cmd(&ws).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
        Command::Config => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = commands::split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
