use std::process::ExitCode;

use clap::Parser;
use permweave_cli::{run, Cli, CliError};

/// Caps rayon's pool when `PERMWEAVE_THREADS` is set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PERMWEAVE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PERMWEAVE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(CliError::runtime)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
