use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match m3_cli::run(m3_cli::Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
