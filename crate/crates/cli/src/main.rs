use std::process::ExitCode;

use clap::Parser;
use specast_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(out) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&out).expect("outcome serializes")
            );
            if out.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("{} did not pass", out.command);
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
