use std::process::ExitCode;

use clap::Parser;

use cavity_md::cli::{report_error, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&mut std::io::stderr(), &e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
