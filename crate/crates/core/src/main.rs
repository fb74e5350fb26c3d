use std::process::ExitCode;

use clap::Parser;
use mecrf::cli::{self, Cli};
use mecrf::Error;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotFound(_) | Error::Config { .. } | Error::LabelMismatch(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match cli::run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
