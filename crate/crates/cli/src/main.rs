//! `kapc` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 solver failure.

mod args;
mod commands;
mod error;
mod io;

use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Cv(a) => commands::cv(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plotdata(a) => commands::plotdata(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version go to stdout with status 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}
