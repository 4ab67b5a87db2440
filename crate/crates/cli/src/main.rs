use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match musu_cli::run(musu_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
