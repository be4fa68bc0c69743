use std::process::ExitCode;

use clap::Parser;
use env_logger::Env;
use filterbasis_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(Env::new().filter_or("BASIS_LOG", default)).init();
    let stdout = std::io::stdout();
    match filterbasis_cli::run(&cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
