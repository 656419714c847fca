use std::process::ExitCode;

use clap::Parser;
use v2v_crossing::cli::{run, Cli, EXIT_CONFIG, EXIT_OK};

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => run(&cli),
        Err(e) => {
            // clap would exit with 2, which here means a safety violation
            let _ = e.print();
            ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK })
        }
    }
}
