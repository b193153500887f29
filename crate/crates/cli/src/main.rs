use std::path::PathBuf;
use std::process::ExitCode;

use cghvp::commands::{self, Variant};
use cghvp::verify::{self, VerifyOptions};
use cghvp::CliResult;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cghvp", version, about = "Hessian-matched training of coarse-grained potentials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample reference frames from a config and start a run directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Precompute Term 1 of the HVP targets.
    Precompute {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model variant.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "FM")]
        variant: Variant,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate replicas of a trained model.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "FM")]
        variant: Variant,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare model replicas with the reference trajectory.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "FM")]
        variant: Variant,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suite and print a pass/fail table.
    Verify {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_term2_sign_error: bool,
    },
}

fn run(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let m = commands::gen_data(&config, &out, seed)?;
            println!("{}", m.path().display());
        }
        Command::Precompute { manifest, seed } => {
            commands::precompute(&manifest, seed)?;
        }
        Command::Train { manifest, variant, seed } => {
            commands::train(&manifest, variant, seed)?;
        }
        Command::Simulate { manifest, variant, replicas, seed } => {
            commands::simulate(&manifest, variant, replicas, seed)?;
        }
        Command::Evaluate { manifest, variant, out } => {
            let (_, report) = commands::evaluate(&manifest, variant, out.as_deref())?;
            print!("{}", report.to_csv());
        }
        Command::Verify { manifest, inject_term2_sign_error } => {
            if let Some(m) = manifest {
                cghvp::manifest::Manifest::load(&m)?;
            }
            let checks = verify::run(VerifyOptions { inject_term2_sign_error });
            print!("{}", verify::render_table(&checks));
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
