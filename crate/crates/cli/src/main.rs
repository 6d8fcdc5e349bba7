//! `voxelfit`: fit, evaluate and compare voxelwise readouts.

mod args;
mod commands;
mod output;
mod record;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] voxelfit::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: max relative error {0:.3e} >= {1:e}")]
    GradCheck(f64, f64),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::GradCheck(..) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: could not configure {k} worker threads: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::NoiseCeiling(a) => commands::noise_ceiling_cmd(a),
        Command::AnalyzeAffine(a) => commands::analyze_affine(a),
        Command::Synth(a) => commands::synth(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
