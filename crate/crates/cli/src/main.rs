//! `gated-mip`: generate data, train, evaluate, sweep, and numerically
//! verify the score-perturbation bounds, all from flat key = value
//! configs. Every command is a pure function of (config, seed) and writes
//! its effective config next to its outputs.

mod args;
mod commands;
mod files;

use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match commands::run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
