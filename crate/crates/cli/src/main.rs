use std::process::ExitCode;

use clap::Parser;
use ldaprune_cli::{config_from_cli, error_json, execute, Cli};

fn main() -> ExitCode {
    match config_from_cli(Cli::parse()).and_then(|c| execute(&c)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
