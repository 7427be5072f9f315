use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match apm_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(std::io::stdout(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("apm: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match apm_cli::run(cli) {
        Ok(outcome) => {
            // a closed stdout (e.g. piped into `head`) is not an error
            let _ = writeln!(std::io::stdout(), "{}", outcome.summary.to_json());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("apm: {}", e.one_line());
            ExitCode::from(2)
        }
    }
}
