use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rsjump::run::{reject, run, Command, RunOptions};

/// Risk-sensitive asset management with jump-diffusion factors.
#[derive(Debug, Parser)]
#[command(name = "rsjump", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// validate, simulate, bounds, solve, verify or all (overrides the config).
    #[arg(long)]
    command: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 64 } else { 0 });
        }
    };
    let command = cli.command.as_deref().map(str::parse::<Command>).transpose();
    let mut opts = RunOptions {
        config: cli.config,
        command: None,
        out: cli.out,
        seed: cli.seed,
        threads: cli.threads,
    };
    let outcome = match command {
        Ok(c) => {
            opts.command = c;
            run(&opts)
        }
        Err(msg) => reject(&opts, msg),
    };
    match &outcome.manifest.error {
        Some(msg) => eprintln!("rsjump: {msg}"),
        None => eprintln!("rsjump: ok, manifest at {}", outcome.manifest_path.display()),
    }
    ExitCode::from(outcome.exit_code as u8)
}
