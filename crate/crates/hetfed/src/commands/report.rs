use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use hetfed_core::meter::{self, Summary};

use super::GlobalArgs;
use crate::csvio::{self, MetricRow};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of per-run metric CSVs (default: OUT/runs).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Also write a whitespace-separated `report.dat` for gnuplot.
    #[arg(long)]
    pub gnuplot: bool,
}

/// Statistics taken from each run file before summarizing across repeats.
pub const STATS: [&str; 8] = [
    "max_accuracy",
    "final_accuracy",
    "final_loss",
    "t_local_ms",
    "t_total_ms",
    "mem_bytes",
    "payload_up_bytes",
    "payload_down_bytes",
];

pub fn file_stats(rows: &[MetricRow]) -> [f64; 8] {
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let last = rows.last().expect("non-empty");
    [
        rows.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max),
        last.accuracy,
        last.loss,
        mean(|r| r.t_local_ms),
        mean(|r| r.t_total_ms),
        rows.iter().map(|r| r.mem_bytes).max().unwrap_or(0) as f64,
        mean(|r| r.payload_up_bytes as f64),
        mean(|r| r.payload_down_bytes as f64),
    ]
}

/// `n1000_f64_r07` groups under `n1000_f64`.
pub fn config_key(stem: &str) -> &str {
    match stem.rsplit_once("_r") {
        Some((key, rep)) if !rep.is_empty() && rep.bytes().all(|b| b.is_ascii_digit()) => key,
        _ => stem,
    }
}

pub struct GroupSummary {
    pub config: String,
    pub files: usize,
    pub stats: Vec<Summary>,
}

pub fn summarize_dir(dir: &Path) -> Result<Vec<GroupSummary>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::EmptyInput(dir.to_path_buf()));
    }
    let mut groups: BTreeMap<String, Vec<[f64; 8]>> = BTreeMap::new();
    for path in &files {
        let rows: Vec<MetricRow> = csvio::read_rows(path)?;
        if rows.is_empty() {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        groups.entry(config_key(stem).to_string()).or_default().push(file_stats(&rows));
    }
    if groups.is_empty() {
        return Err(CliError::EmptyInput(dir.to_path_buf()));
    }
    Ok(groups
        .into_iter()
        .map(|(config, per_file)| {
            let stats = (0..STATS.len())
                .map(|s| meter::summarize(&per_file.iter().map(|f| f[s]).collect::<Vec<_>>()).expect("non-empty group"))
                .collect();
            GroupSummary { config, files: per_file.len(), stats }
        })
        .collect())
}

/// Writes `report.csv`: one row per configuration with mean, median and
/// sample standard deviation of each statistic across its repeat files.
pub fn run(global: &GlobalArgs, args: &ReportArgs) -> Result<(), CliError> {
    let input = args.input.clone().unwrap_or_else(|| global.out.join("runs"));
    let groups = summarize_dir(&input)?;
    let mut header = vec!["config".to_string(), "files".to_string()];
    for s in STATS {
        for agg in ["mean", "median", "stddev"] {
            header.push(format!("{s}_{agg}"));
        }
    }
    super::create_dir(&global.out)?;
    let path = global.out.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::csv(&path, e))?;
    w.write_record(&header).map_err(|e| CliError::csv(&path, e))?;
    let mut dat = format!("# {}\n", header.join(" "));
    for g in &groups {
        let mut rec = vec![g.config.clone(), g.files.to_string()];
        for s in &g.stats {
            rec.extend([s.mean.to_string(), s.median.to_string(), s.stddev.to_string()]);
        }
        w.write_record(&rec).map_err(|e| CliError::csv(&path, e))?;
        writeln!(dat, "{}", rec.join(" ")).expect("write to String");
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    println!("{}", path.display());
    if args.gnuplot {
        let dat_path = global.out.join("report.dat");
        std::fs::write(&dat_path, dat).map_err(|e| CliError::io(&dat_path, e))?;
        println!("{}", dat_path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_strip_repeat_suffix() {
        assert_eq!(config_key("n1000_f64_r07"), "n1000_f64");
        assert_eq!(config_key("session_r00"), "session");
        assert_eq!(config_key("n1000_float-4-6_rx"), "n1000_float-4-6_rx");
        assert_eq!(config_key("plain"), "plain");
    }
}
