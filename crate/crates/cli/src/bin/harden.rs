use std::process::ExitCode;

use clap::Parser;
use workbench_cli::harden::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(report) => {
            print!("{}", report.output);
            if report.findings > 0 {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("harden: {e:#}");
            ExitCode::from(2)
        }
    }
}
