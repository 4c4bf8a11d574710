//! Command-line experiment runner for the MoE dispatch simulator.

pub mod bench;
pub mod config;
pub mod error;
pub mod selftest;

use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GateBench,
    CommBench,
    MoeBench,
    Selftest,
}

/// Runs one subcommand, writing its files into `out` (created if missing).
/// Returns the paths written.
pub fn run(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    match cmd {
        Command::GateBench => bench::gate_bench(cfg, out),
        Command::CommBench => bench::comm_bench(cfg, out),
        Command::MoeBench => bench::moe_bench(cfg, out),
        Command::Selftest => selftest::selftest(cfg.seed, out),
    }
}
