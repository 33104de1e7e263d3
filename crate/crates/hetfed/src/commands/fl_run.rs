use std::path::PathBuf;

use clap::Args;
use hetfed_core::fedsim::{self, RoundReport, RoundSink, SessionConfig, SessionResult};
use serde::Serialize;

use super::{create_dir, GlobalArgs};
use crate::checkpoint;
use crate::config::load_session;
use crate::csvio::{self, MetricRow};
use crate::error::CliError;
use crate::exec::PoolExecutor;
use crate::timing::MonotonicClock;

#[derive(Debug, Args)]
pub struct FlRunArgs {
    /// JSON session config.
    pub config: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageRow {
    pub repeat: usize,
    pub round: usize,
    pub layer: usize,
    pub positions: usize,
    pub min_coverage: u32,
    pub max_coverage: u32,
    pub uncovered: usize,
    pub devices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkipRow {
    pub repeat: usize,
    pub round: usize,
    pub device_id: usize,
    pub required_bytes: u64,
    pub cap_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionSummary {
    pub repeat: usize,
    pub data_seed: u64,
    pub model_seed: u64,
    pub rounds: usize,
    pub devices: usize,
    pub max_val_accuracy: f64,
    pub max_acc_round: usize,
    pub final_val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Flattens round reports into the metrics schema as they arrive.
#[derive(Default)]
pub struct Collector {
    pub repeat: usize,
    pub devices: usize,
    pub metrics: Vec<MetricRow>,
    pub coverage: Vec<CoverageRow>,
    pub skips: Vec<SkipRow>,
}

impl RoundSink for Collector {
    fn round(&mut self, r: &RoundReport) {
        let ms = 1e3;
        for d in &r.devices {
            self.metrics.push(MetricRow {
                round: r.round,
                device_id: d.device_id,
                epoch: d.epochs,
                accuracy: r.accuracy,
                loss: d.loss,
                t_local_ms: d.time.t_local * ms,
                t_upload_ms: d.time.t_upload * ms,
                t_global_ms: d.time.t_global * ms,
                t_download_ms: d.time.t_download * ms,
                t_total_ms: d.time.total * ms,
                mem_bytes: d.memory.total_bytes,
                payload_up_bytes: d.payload_up_bytes,
                payload_down_bytes: d.payload_down_bytes,
            });
        }
        for (layer, counts) in r.coverage.iter().enumerate() {
            self.coverage.push(CoverageRow {
                repeat: self.repeat,
                round: r.round,
                layer,
                positions: counts.len(),
                min_coverage: counts.iter().copied().min().unwrap_or(0),
                max_coverage: counts.iter().copied().max().unwrap_or(0),
                uncovered: counts.iter().filter(|&&c| c == 0).count(),
                devices: self.devices,
            });
        }
        for s in &r.skipped {
            self.skips.push(SkipRow {
                repeat: self.repeat,
                round: r.round,
                device_id: s.device_id,
                required_bytes: s.required,
                cap_bytes: s.cap,
            });
        }
    }
}

/// Runs one session with the wall clock and the thread pool.
pub fn session(cfg: &SessionConfig, exec: &PoolExecutor, sink: &mut Collector) -> Result<SessionResult, CliError> {
    sink.devices = cfg.devices.len();
    Ok(fedsim::run_session_with(cfg, exec, &MonotonicClock::new(), sink)?)
}

/// `--seed` replaces both seeds in the file; repeat r adds r to each.
pub fn run(global: &GlobalArgs, args: &FlRunArgs) -> Result<(), CliError> {
    let mut base = load_session(&args.config)?;
    if let Some(seed) = global.seed {
        base.data.seed = seed;
        base.model_seed = seed;
    }
    if let Some(f) = &global.format {
        let [format] = f.0[..] else {
            return Err(CliError::validation("fl-run takes a single --format (the global model's)"));
        };
        base.global_format = format;
    }
    base.validate()?;
    let repeats = global.repeats_or(1);
    let exec = PoolExecutor::from_env();
    create_dir(&global.out)?;
    let mut coverage = Vec::new();
    let mut skips = Vec::new();
    let mut summaries = Vec::new();
    for r in 0..repeats {
        let mut cfg = base.clone();
        cfg.data.seed = base.data.seed.wrapping_add(r as u64);
        cfg.model_seed = base.model_seed.wrapping_add(r as u64);
        let mut sink = Collector { repeat: r, ..Collector::default() };
        let result = session(&cfg, &exec, &mut sink)?;
        let (best_round, best) = result
            .reports
            .iter()
            .fold((0, f64::NEG_INFINITY), |b, rep| if rep.accuracy > b.1 { (rep.round, rep.accuracy) } else { b });
        summaries.push(SessionSummary {
            repeat: r,
            data_seed: cfg.data.seed,
            model_seed: cfg.model_seed,
            rounds: cfg.rounds,
            devices: cfg.devices.len(),
            max_val_accuracy: best,
            max_acc_round: best_round,
            final_val_accuracy: result.reports.last().map_or(f64::NAN, |rep| rep.accuracy),
            test_accuracy: result.test_accuracy,
        });
        csvio::write_rows(&global.out.join("runs").join(format!("session_r{r:02}.csv")), &sink.metrics, Some(&csvio::METRIC_COLUMNS))?;
        let model_path = global.out.join(format!("model_r{r:02}.hfl"));
        std::fs::write(&model_path, checkpoint::encode(&result.model, None)).map_err(|e| CliError::io(&model_path, e))?;
        eprintln!("session r{r}: final val acc {:.4}, test acc {:.4}", summaries[r].final_val_accuracy, result.test_accuracy);
        coverage.extend(sink.coverage);
        skips.extend(sink.skips);
    }
    csvio::write_rows(&global.out.join("coverage.csv"), &coverage, None)?;
    csvio::write_rows(
        &global.out.join("skips.csv"),
        &skips,
        Some(&["repeat", "round", "device_id", "required_bytes", "cap_bytes"]),
    )?;
    let path = global.out.join("summary.csv");
    csvio::write_rows(&path, &summaries, None)?;
    println!("{}", path.display());
    Ok(())
}
