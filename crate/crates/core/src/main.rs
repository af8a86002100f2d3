use std::process::ExitCode;

use clap::Parser;
use molsem::cli::{exit_code, run, Cli, EXIT_TOLERANCE};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap exits 2 on usage errors and 0 for --help/--version.
            e.exit();
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            eprintln!("manifest: {}", outcome.manifest.display());
            match outcome.tolerance_breach {
                Some(msg) => {
                    eprintln!("tolerance breach: {msg}");
                    ExitCode::from(EXIT_TOLERANCE as u8)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
