//! Runs the batch pipeline on the state-independent model through the
//! library entry point used by the `rsjump` binary.

use std::path::PathBuf;

use rsjump::run::{run, Command, RunOptions};

pub fn run_example() -> rsjump::Result<()> {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/state_independent.json");
    let out = std::env::temp_dir().join(format!("rsjump-pipeline-{}", std::process::id()));
    let outcome = run(&RunOptions { config, command: Some(Command::Solve), out: out.clone(), seed: Some(1), threads: None });
    for stage in &outcome.manifest.stages {
        println!("{:<9} {:>8.3} s  {}", stage.name, stage.seconds, stage.status);
    }
    println!("closed-form error {}", outcome.manifest.metrics["closed_form_max_error"]);
    println!("exit code {}, artifacts in {}", outcome.exit_code, out.display());
    std::fs::remove_dir_all(&out)?;
    if outcome.exit_code != 0 {
        return Err(rsjump::Error::Config(outcome.manifest.error.unwrap_or_default()));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> rsjump::Result<()> {
    run_example()
}
