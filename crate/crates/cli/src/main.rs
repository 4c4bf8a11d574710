use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moesim::{run, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "moesim", version, about = "Sparse MoE dispatch simulator")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// RNG seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Gate routing sweep over token and expert counts.
    GateBench,
    /// Vanilla vs hierarchical AllToAll over cluster shapes.
    CommBench,
    /// End-to-end layer timing over batch sizes.
    MoeBench,
    /// Oracle-equivalence checks.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    };
    let result = cfg.and_then(|mut cfg| {
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        let cmd = match cli.command {
            Sub::GateBench => Command::GateBench,
            Sub::CommBench => Command::CommBench,
            Sub::MoeBench => Command::MoeBench,
            Sub::Selftest => Command::Selftest,
        };
        run(cmd, &cfg, &out)
    });
    match result {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
