mod args;
mod checks;
mod run;

use args::Cli;
use clap::error::ErrorKind;
use clap::Parser;
use std::process::ExitCode;

const USAGE_EXIT: u8 = 64;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => USAGE_EXIT,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dpca: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
