//! `tyrist`: synthetic data, training, evaluation, trimming, FLOPs
//! accounting and loss landscapes from the command line.

mod args;
mod commands;
mod errors;
mod logging;
mod manifest;
mod overrides;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};

fn run() -> anyhow::Result<()> {
    let raw: Vec<String> = std::env::args().collect();
    let (clap_args, overrides) = overrides::split(&raw);
    let cli = Cli::try_parse_from(&clap_args).unwrap_or_else(|e| e.exit());
    match cli.command {
        Command::Synth(a) => commands::synth(&a, &overrides, &raw),
        Command::Train(a) => commands::train(&a, &overrides, &raw),
        Command::Eval(a) => commands::eval(&a, &overrides, &raw),
        Command::Trim(a) => commands::trim(&a, &overrides, &raw),
        Command::Flops(a) => commands::flops(&a, &overrides, &raw),
        Command::Landscape(a) => commands::landscape(&a, &overrides, &raw),
    }
}

fn main() -> ExitCode {
    logging::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = errors::classify(&e);
            errors::report(&e, class);
            ExitCode::from(class.code())
        }
    }
}
