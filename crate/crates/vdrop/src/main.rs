use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = vdrop::cli::Cli::parse();
    match vdrop::cli::execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.class());
            ExitCode::FAILURE
        }
    }
}
