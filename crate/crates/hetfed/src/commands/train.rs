use clap::Args;
use hetfed_core::meter::{self, MemoryAccount};
use hetfed_core::mlp::{self, layer_dims};
use hetfed_core::numfmt::ScalarFormat;
use hetfed_core::synthdata::{self, DataSpec};
use hetfed_core::Exec;
use serde::Serialize;

use super::{GlobalArgs, DEFAULT_REPEATS};
use crate::alloc_stats;
use crate::config::{DEFAULT_HIDDEN, DEFAULT_WIDTH};
use crate::csvio::{self, slug, MetricRow};
use crate::error::CliError;
use crate::timing::Stopwatch;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Comma-separated training-set sizes.
    #[arg(long, value_delimiter = ',', conflicts_with = "n_train")]
    pub sizes: Vec<usize>,
    /// A single training-set size (default 1000).
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub n_val: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    /// Hidden layers of the MLP.
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    pub hidden: usize,
    /// Neurons per hidden layer.
    #[arg(long, default_value_t = DEFAULT_WIDTH)]
    pub width: usize,
    /// Force the bit-level software path even where a native one exists.
    #[arg(long)]
    pub emulate: bool,
}

/// One centralized training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub format: ScalarFormat,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub dims: Vec<usize>,
    pub exec: Exec,
}

impl TrainRun {
    /// The default architecture at lr 0.5 on the default data layout.
    pub fn new(n_train: usize, format: ScalarFormat, seed: u64, epochs: usize) -> Self {
        TrainRun {
            n_train,
            n_val: 1000,
            n_test: 1000,
            format,
            seed,
            epochs,
            lr: 0.5,
            dims: layer_dims(5, DEFAULT_HIDDEN, DEFAULT_WIDTH),
            exec: Exec::Auto,
        }
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec { n_train: self.n_train, n_val: self.n_val, n_test: self.n_test, seed: self.seed, ..DataSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub n_train: usize,
    pub format: String,
    pub repeat: usize,
    pub seed: u64,
    pub epochs: usize,
    pub max_val_accuracy: f64,
    pub max_acc_epoch: usize,
    pub final_val_accuracy: f64,
    pub test_accuracy: f64,
    pub t_epoch_ms_mean: f64,
    pub t_epoch_ms_median: f64,
    pub mem_weights_bytes: u64,
    pub mem_biases_bytes: u64,
    pub mem_gradients_bytes: u64,
    pub mem_activations_bytes: u64,
    pub mem_deltas_bytes: u64,
    pub mem_inputs_bytes: u64,
    pub mem_labels_bytes: u64,
    pub mem_bytes: u64,
    /// Measured heap growth, including format-independent overhead; 0 when
    /// the counting allocator is not installed.
    pub alloc_peak_bytes: u64,
}

pub struct TrainOutcome {
    /// One row per epoch: validation accuracy after the update, training
    /// loss before it.
    pub rows: Vec<MetricRow>,
    pub summary: TrainSummary,
    pub epoch_ms: Vec<f64>,
    pub model: mlp::MlpModel,
}

pub fn train_once(run: &TrainRun, repeat: usize) -> Result<TrainOutcome, CliError> {
    let spec = run.data_spec();
    let (train, val, test) = synthdata::generate(&spec, run.format)?;
    let mut model = mlp::init_model(&run.dims, run.format, run.seed)?;
    let mem: MemoryAccount =
        meter::memory_footprint(&model, run.n_train, run.format).map_err(CliError::validation)?;
    let mut rows = Vec::with_capacity(run.epochs);
    let mut epoch_ms = Vec::with_capacity(run.epochs);
    let mut best = (mlp::evaluate(&model, &val)?, 0);
    let (res, alloc_peak_bytes) = alloc_stats::measure(|| -> Result<(), CliError> {
        for epoch in 1..=run.epochs {
            let sw = Stopwatch::start();
            let (next, loss) = mlp::train_epoch_with(&model, &train, run.lr, run.exec)?;
            let ms = sw.elapsed_ms();
            model = next;
            let accuracy = mlp::evaluate(&model, &val)?;
            if accuracy > best.0 {
                best = (accuracy, epoch);
            }
            epoch_ms.push(ms);
            rows.push(MetricRow {
                round: epoch,
                device_id: 0,
                epoch,
                accuracy,
                loss,
                t_local_ms: ms,
                t_total_ms: ms,
                mem_bytes: mem.total_bytes,
                ..MetricRow::default()
            });
        }
        Ok(())
    });
    res?;
    let timing = meter::summarize(&epoch_ms);
    let summary = TrainSummary {
        n_train: run.n_train,
        format: run.format.to_string(),
        repeat,
        seed: run.seed,
        epochs: run.epochs,
        max_val_accuracy: best.0,
        max_acc_epoch: best.1,
        final_val_accuracy: rows.last().map_or(best.0, |r| r.accuracy),
        test_accuracy: mlp::evaluate(&model, &test)?,
        t_epoch_ms_mean: timing.map_or(0.0, |s| s.mean),
        t_epoch_ms_median: timing.map_or(0.0, |s| s.median),
        mem_weights_bytes: mem.weights_bytes,
        mem_biases_bytes: mem.biases_bytes,
        mem_gradients_bytes: mem.gradients_bytes,
        mem_activations_bytes: mem.activations_bytes,
        mem_deltas_bytes: mem.deltas_bytes,
        mem_inputs_bytes: mem.inputs_bytes,
        mem_labels_bytes: mem.labels_bytes,
        mem_bytes: mem.total_bytes,
        alloc_peak_bytes,
    };
    Ok(TrainOutcome { rows, summary, epoch_ms, model })
}

/// Run files are `runs/n{size}_{format}_r{repeat}.csv`; `summary.csv` has one
/// row per run. Runs execute one at a time so their timings don't contend.
pub fn run(global: &GlobalArgs, args: &TrainArgs) -> Result<(), CliError> {
    let sizes = match (&args.sizes[..], args.n_train) {
        ([], None) => vec![1000],
        ([], Some(n)) => vec![n],
        (s, _) => s.to_vec(),
    };
    if !(args.lr > 0.0) || !args.lr.is_finite() {
        return Err(CliError::validation(format!("--lr must be positive, got {}", args.lr)));
    }
    if args.width == 0 {
        return Err(CliError::validation("--width must be at least 1"));
    }
    let formats = global.formats_or(&[ScalarFormat::F64]);
    let repeats = global.repeats_or(DEFAULT_REPEATS);
    let exec = if args.emulate { Exec::Emulated } else { Exec::Auto };
    let mut runs = Vec::new();
    for &n in &sizes {
        for r in 0..repeats {
            for &format in &formats {
                let run = TrainRun {
                    n_train: n,
                    n_val: args.n_val,
                    n_test: args.n_test,
                    format,
                    seed: global.seed().wrapping_add(r as u64),
                    epochs: args.epochs,
                    lr: args.lr,
                    dims: layer_dims(5, args.hidden, args.width),
                    exec,
                };
                run.data_spec().validate()?;
                runs.push((run, r));
            }
        }
    }
    let runs_dir = global.out.join("runs");
    let mut summaries = Vec::with_capacity(runs.len());
    for (run, r) in &runs {
        let outcome = train_once(run, *r)?;
        if run.epochs > 0 {
            let name = format!("n{}_{}_r{:02}.csv", run.n_train, slug(&run.format.to_string()), r);
            csvio::write_rows(&runs_dir.join(name), &outcome.rows, None)?;
        }
        eprintln!(
            "n={} {} r{}: max val acc {:.4} at epoch {}, {:.3} ms/epoch",
            run.n_train, run.format, r, outcome.summary.max_val_accuracy, outcome.summary.max_acc_epoch,
            outcome.summary.t_epoch_ms_mean
        );
        summaries.push(outcome.summary);
    }
    let path = global.out.join("summary.csv");
    csvio::write_rows(&path, &summaries, None)?;
    println!("{}", path.display());
    Ok(())
}
