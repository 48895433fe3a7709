//! `salvit`: project, train, predict, evaluate and benchmark the tangent
//! saliency pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Marks errors that exit with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "salvit", version, about = "Tangent-image saliency for 360 video")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `train.optim.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Layout JSON file (same as `--set layout.file=PATH`).
    #[arg(long, global = true)]
    layout: Option<PathBuf>,
    /// Worker threads; defaults to SALVIT_THREADS, else 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth(commands::SynthArgs),
    /// Resample an ERP image onto the layout's tangent planes.
    Project(commands::ProjectArgs),
    /// Blend tangent patches back onto an ERP raster.
    Backproject(commands::BackprojectArgs),
    /// Train on a manifest; writes a checkpoint and a per-step loss CSV.
    Train(commands::TrainArgs),
    /// Predict saliency for every window of every clip.
    Predict(commands::PredictArgs),
    /// Score predictions against ground truth.
    Eval(commands::EvalArgs),
    /// Late fusion of two prediction directories.
    Fuse(commands::FuseArgs),
    /// Attention pair counts and forward wall time per scheme.
    Bench(commands::BenchArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.global.overrides.clone();
    if let Some(l) = &cli.global.layout {
        overrides.push(format!("layout.file={}", serde_json::to_string(l)?));
    }
    let mut cfg = config::RunConfig::resolve(cli.global.config.as_deref(), &overrides)?;
    if let Some(t) = cli.global.threads {
        cfg.train.threads = t;
    }
    let threads = salvit::train::thread_count(cfg.train.threads);
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Project(a) => commands::project(&cfg, &a),
        Command::Backproject(a) => commands::backproject(&cfg, &a),
        Command::Train(a) => commands::train(cfg, &a),
        Command::Predict(a) => commands::predict(&cfg, &a, threads),
        Command::Eval(a) => commands::eval(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Bench(a) => commands::bench(&cfg, &a),
    }
}
