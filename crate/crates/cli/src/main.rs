//! `deadnet`: one subcommand per pipeline step.
//!
//! JSON results go to standard output and human-readable progress to
//! standard error. Exit status is 0 on success, 1 when inputs are rejected
//! or a computation fails, and 2 on a usage error. Commands given `--out`
//! write `run.json` there: the argument vector, seed, thread count, tool
//! version and a CRC-32 of every input file.
//!
//! `DEADNET_THREADS` caps the worker pool.

mod args;
mod commands;
mod record;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("DEADNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DEADNET_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
