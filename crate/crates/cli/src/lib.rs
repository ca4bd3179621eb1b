//! The `avic` command line: configuration files, stage commands, sweeps
//! and reports.

pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::Parser;

pub use commands::{dispatch, Cli, Command};
pub use config::{parse_config, Settings};

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status: 0 on success, 1 on a failed command and 2 on a
/// usage error.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
