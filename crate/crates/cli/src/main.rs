//! `gausssurf` binary: train, mesh, bind, refine, render, and evaluate
//! surface-aligned gaussian scenes.

mod cli;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::{Cli, Command};
use crate::commands::UsageError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Err(msg) = init_threads(cli.global.threads) {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let file = config::load(cli.global.config.as_deref())?;
    std::fs::create_dir_all(&cli.global.out)?;
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => commands::synth(a, g, &file),
        Command::Train(a) => commands::train(a, g, &file),
        Command::ExtractMesh(a) => commands::extract_mesh(a, g, &file),
        Command::Bind(a) => commands::bind(a, g),
        Command::Refine(a) => commands::refine(a, g, &file),
        Command::Render(a) => commands::render(a, g),
        Command::Eval(a) => commands::eval(a, g, &file),
    }
}

/// Thread count resolution: --threads, then GAUSSSURF_THREADS, then the
/// rayon default (all cores).
fn init_threads(flag: Option<usize>) -> Result<(), String> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("GAUSSSURF_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|e| format!("bad GAUSSSURF_THREADS `{v}`: {e}"))?,
            ),
            Err(_) => None,
        },
    };
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err("thread count must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("thread pool init failed: {e}"))
}
