use std::process::ExitCode;

use clap::Parser;
use sgta_cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = init_threads().and_then(|_| run(cli));
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sgta: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
