use std::process::ExitCode;

use cholgauss_cli::commands::{run, Cli, Outcome};
use clap::Parser;
use serde_json::json;

/// Exit code for commands that ran but could not complete all work.
const EXIT_INCOMPLETE: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(outcome @ Outcome::Incomplete { .. }) => {
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&outcome).unwrap_or_default()
            );
            ExitCode::from(EXIT_INCOMPLETE)
        }
        Err(err) => {
            let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
            let diagnostic =
                json!({ "status": "error", "error": err.to_string(), "causes": chain });
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&diagnostic).unwrap_or_default()
            );
            ExitCode::FAILURE
        }
    }
}
