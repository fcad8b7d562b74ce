use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rewardgen::cli::{run, Cli, OUT_ROOT_ENV};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
    match run(&cli.command, root.as_deref()) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("wrote {} artifacts", outcome.manifest.artifacts.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
