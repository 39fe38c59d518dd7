use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use refinematch::cli::{command_name, error_line, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let line = serde_json::json!({"status": "error", "kind": "usage", "message": e.kind().to_string()});
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    let name = command_name(&cli.command);
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(name, &e));
            ExitCode::FAILURE
        }
    }
}
