//! Subcommands of the `hetfed` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hetfed_core::numfmt::ScalarFormat;

use crate::config::parse_format_list;
use crate::error::CliError;

pub mod bench;
pub mod fl_run;
pub mod gen_data;
pub mod report;
pub mod train;

/// Repeat count when `--repeats` is not given, for the timing commands.
pub const DEFAULT_REPEATS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "hetfed", version, about = "Federated learning on heterogeneous, compressed, reduced-precision devices")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Base seed; repeat r uses seed + r.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Repeats per configuration (20 for train and bench, 1 for fl-run).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: Option<u64>,
    /// Comma-separated scalar formats: f64, f32, f16, float(E,S),
    /// u8affine(scale,zero) or int(W,scale,zero).
    #[arg(long, global = true, value_parser = parse_formats)]
    pub format: Option<FormatList>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatList(pub Vec<ScalarFormat>);

fn parse_formats(s: &str) -> Result<FormatList, String> {
    parse_format_list(s).map(FormatList)
}

impl GlobalArgs {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn repeats_or(&self, default: usize) -> usize {
        self.repeats.map_or(default, |r| r as usize)
    }

    pub fn formats_or(&self, default: &[ScalarFormat]) -> Vec<ScalarFormat> {
        self.format.as_ref().map_or_else(|| default.to_vec(), |f| f.0.clone())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train/validation/test sets as CSV.
    GenData(gen_data::GenDataArgs),
    /// Centralized full-batch training sweep over sizes and formats.
    Train(train::TrainArgs),
    /// Run a federated session described by a JSON config.
    FlRun(fl_run::FlRunArgs),
    /// Time training epochs and scalar arithmetic per format.
    Bench(bench::BenchArgs),
    /// Summarize per-run metric CSVs across repeats.
    Report(report::ReportArgs),
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data::run(&cli.global, a),
        Command::Train(a) => train::run(&cli.global, a),
        Command::FlRun(a) => fl_run::run(&cli.global, a),
        Command::Bench(a) => bench::run(&cli.global, a),
        Command::Report(a) => report::run(&cli.global, a),
    }
}

pub(crate) fn create_dir(path: &std::path::Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
