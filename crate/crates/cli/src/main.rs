use std::process::ExitCode;

use clap::Parser;

use scaffold4d_cli::cli::{run, Cli};
use scaffold4d_cli::{thread_count, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = thread_count(std::env::var("SCAFFOLD4D_THREADS").ok().as_deref()).and_then(|threads| {
        if let Some(n) = threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        run(cli)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
