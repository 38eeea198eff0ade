use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use pm_gmrf_cli::{execute, Cli};

fn fail(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            fail("UsageError", e.to_string().lines().next().unwrap_or_default());
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            fail(e.kind(), &e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
