use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = robagg_cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match robagg_cli::run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
