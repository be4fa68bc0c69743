//! Command-line front end: `plan → decompose → verify → train → report`.
//!
//! Exit status 0 on success, 2 for invalid input or plans, 3 for numerical
//! failures (verification mismatch, divergence, non-finite values).

pub mod args;
pub mod commands;
pub mod table;

use std::io::Write;

use args::{Cli, Command};
use filterbasis::Error;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::NonConvergence { .. } => {
                EXIT_NUMERICAL
            }
            _ => EXIT_VALIDATION,
        };
        Failure::new(code, e.to_string())
    }
}

/// Run a parsed command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match &cli.command {
        Command::Plan(a) => commands::plan(a, out),
        Command::Decompose(a) => commands::decompose(a, out),
        Command::Verify(a) => commands::verify(a, out),
        Command::Train(a) => commands::train_cmd(a, out),
        Command::Report(a) => commands::report(a, out),
        Command::Synth(a) => commands::synth(a, out),
    }
}
