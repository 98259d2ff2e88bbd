//! `steerlab` command-line harness.
//!
//! Exit code 0 on success; on failure a single machine-parsable JSON line
//! `{"error": "..."}` goes to stderr and the exit code is 1.

mod cli;
mod commands;
mod reports;

use clap::Parser;

use cli::{Cli, Command};

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(args) => commands::estimate::run(args),
        Command::SweepLayer(args) => commands::sweep_layer::run(args),
        Command::SweepAlpha(args) => commands::sweep_alpha::run(args),
        Command::Run(args) => commands::run::run(args),
        Command::Report(args) => commands::report::run(args),
        Command::ValidateCorpus(args) => commands::validate::run(args),
        Command::MakePlanted(args) => commands::make_planted::run(args),
    };
    if let Err(err) = result {
        eprintln!("{}", serde_json::json!({ "error": format!("{err:#}") }));
        std::process::exit(1);
    }
}
