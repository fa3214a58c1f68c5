mod args;
mod commands;

use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use args::Cli;
use commands::Failure;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => Cli::command()
            .error(clap::error::ErrorKind::ArgumentConflict, msg)
            .exit(),
        Err(Failure::Data { stage, source }) => {
            eprintln!("error: {stage}: {source}");
            ExitCode::from(1)
        }
    }
}
