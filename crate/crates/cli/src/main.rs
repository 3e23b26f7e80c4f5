use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use lerg_cli::{describe, Invocation, Stage};

/// Train, rewire and evaluate a compressed graph recommender.
#[derive(Debug, Parser)]
#[command(name = "lerg", version)]
struct Args {
    /// INI configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Stage to run.
    #[arg(long, value_enum, default_value_t = Stage::All)]
    stage: Stage,
    /// Artifact directory.
    #[arg(long, default_value = "artifacts")]
    out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the files the stage would read and write, then exit.
    #[arg(long)]
    dry_run: bool,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LERG_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("LERG_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(args: Args) -> Result<()> {
    init_threads()?;
    let inv = Invocation {
        config: args.config,
        stage: args.stage,
        out: args.out,
        seed: args.seed,
    };
    if args.dry_run {
        print!("{}", describe(&inv.plan()?, &inv.out));
        return Ok(());
    }
    inv.run()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
