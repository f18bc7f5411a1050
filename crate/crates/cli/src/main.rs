mod args;
mod commands;
mod config;
mod failure;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use crate::args::Cli;
use crate::commands::Common;
use crate::failure::Failure;

fn usage_failure(err: &clap::Error) -> Failure {
    let rendered = err.render().to_string();
    let (message, usage) = match rendered.find("Usage:") {
        Some(i) => (&rendered[..i], rendered[i..].lines().next().unwrap_or_default()),
        None => (rendered.as_str(), ""),
    };
    let message = message.trim().trim_start_matches("error:").split_whitespace().collect::<Vec<_>>().join(" ");
    Failure::usage(message, json!({ "kind": format!("{:?}", err.kind()), "usage": usage.trim() }))
}

fn run() -> Result<(), Failure> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(usage_failure(&e)),
    };
    let (defaults, defaults_file) = config::load_from_env()?;
    let common = Common::resolve(&cli.global, &defaults, defaults_file)?;
    env_logger::Builder::new()
        .parse_filters(&common.log_level)
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = common.threads {
        if !softfer::par::set_thread_cap(n) {
            log::warn!("thread pool already initialised; --threads ignored");
        }
    }
    commands::run(&cli.command, &common, &defaults)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code as u8)
        }
    }
}
