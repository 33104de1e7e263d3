use std::hint::black_box;

use clap::Args;
use hetfed_core::meter;
use hetfed_core::numfmt::{self, ArithOp, EncodedScalar, ScalarFormat};
use hetfed_core::rng::SeededRng;
use hetfed_core::Exec;
use serde::Serialize;

use super::{GlobalArgs, DEFAULT_REPEATS};
use crate::commands::train::{train_once, TrainRun};
use crate::csvio;
use crate::error::CliError;
use crate::timing::Stopwatch;

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1000)]
    pub n_train: usize,
    /// Timed epochs per run.
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Scalar operations per arithmetic timing.
    #[arg(long, default_value_t = 100_000)]
    pub ops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochBench {
    pub format: String,
    pub exec: &'static str,
    pub n_train: usize,
    pub repeat: usize,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub t_epoch_ms_mean: f64,
    pub t_epoch_ms_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpBench {
    pub format: String,
    pub op: &'static str,
    pub repeat: usize,
    pub ops: usize,
    /// XOR of every result pattern, to pin the work done.
    pub checksum: u64,
    pub t_op_ns: f64,
}

const OPS: [(ArithOp, &str); 4] = [(ArithOp::Add, "add"), (ArithOp::Sub, "sub"), (ArithOp::Mul, "mul"), (ArithOp::Div, "div")];

/// Times `count` emulated operations over seeded operands.
pub fn time_op(op: ArithOp, format: ScalarFormat, count: usize, seed: u64) -> (u64, f64) {
    let mut rng = SeededRng::new(seed);
    let operands: Vec<EncodedScalar> = (0..1024)
        .map(|_| numfmt::encode(rng.standard_normal() * 4.0, format).expect("finite operand"))
        .collect();
    let sw = Stopwatch::start();
    let mut checksum = 0u64;
    for i in 0..count {
        let a = operands[i % 1024];
        let b = operands[(i * 7 + 3) % 1024];
        checksum ^= black_box(numfmt::arith(op, a, b, format)).bits;
    }
    let ns = sw.elapsed_secs() * 1e9 / count.max(1) as f64;
    (checksum, ns)
}

/// Writes `bench_epochs.csv` (native and emulated epochs per format) and
/// `bench_ops.csv` (emulated scalar arithmetic). Runs are sequential.
pub fn run(global: &GlobalArgs, args: &BenchArgs) -> Result<(), CliError> {
    let formats = global.formats_or(&[ScalarFormat::F64, ScalarFormat::F32, ScalarFormat::F16]);
    let repeats = global.repeats_or(DEFAULT_REPEATS);
    if args.epochs == 0 {
        return Err(CliError::validation("--epochs must be at least 1"));
    }
    let mut epochs = Vec::new();
    let mut ops = Vec::new();
    for r in 0..repeats {
        let seed = global.seed().wrapping_add(r as u64);
        for &format in &formats {
            for (exec, name) in [(Exec::Auto, "auto"), (Exec::Emulated, "emulated")] {
                let run = TrainRun { exec, ..TrainRun::new(args.n_train, format, seed, args.epochs) };
                run.data_spec().validate()?;
                let out = train_once(&run, r)?;
                let t = meter::summarize(&out.epoch_ms).expect("at least one epoch");
                epochs.push(EpochBench {
                    format: format.to_string(),
                    exec: name,
                    n_train: args.n_train,
                    repeat: r,
                    seed,
                    epochs: args.epochs,
                    final_loss: out.rows.last().map_or(f64::NAN, |row| row.loss),
                    t_epoch_ms_mean: t.mean,
                    t_epoch_ms_median: t.median,
                });
            }
            for (op, name) in OPS {
                let (checksum, t_op_ns) = time_op(op, format, args.ops, seed);
                ops.push(OpBench { format: format.to_string(), op: name, repeat: r, ops: args.ops, checksum, t_op_ns });
            }
        }
        eprintln!("bench repeat {r} done");
    }
    for (name, written) in [
        ("bench_epochs.csv", csvio::write_rows(&global.out.join("bench_epochs.csv"), &epochs, None)),
        ("bench_ops.csv", csvio::write_rows(&global.out.join("bench_ops.csv"), &ops, None)),
    ] {
        written?;
        println!("{}", global.out.join(name).display());
    }
    Ok(())
}
