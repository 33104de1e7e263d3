//! CSV schemas and helpers.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Per-epoch or per-device-round metrics, in the fixed column order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub device_id: usize,
    pub epoch: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub t_local_ms: f64,
    pub t_upload_ms: f64,
    pub t_global_ms: f64,
    pub t_download_ms: f64,
    pub t_total_ms: f64,
    pub mem_bytes: u64,
    pub payload_up_bytes: u64,
    pub payload_down_bytes: u64,
}

pub const METRIC_COLUMNS: [&str; 13] = [
    "round",
    "device_id",
    "epoch",
    "accuracy",
    "loss",
    "t_local_ms",
    "t_upload_ms",
    "t_global_ms",
    "t_download_ms",
    "t_total_ms",
    "mem_bytes",
    "payload_up_bytes",
    "payload_down_bytes",
];

/// Columns holding measured wall-clock time: every `t_*` column except the
/// analytic transfer times.
pub fn is_wall_clock(column: &str) -> bool {
    column.starts_with("t_") && !column.starts_with("t_upload") && !column.starts_with("t_download")
}

/// Writes `rows` with a header derived from `T`'s fields. An empty slice
/// still writes the header when `header` is given.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: Option<&[&str]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    // serde derives the header from the first row; an empty table needs it spelled out
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_writer(file);
    if let (true, Some(h)) = (rows.is_empty(), header) {
        w.write_record(h).map_err(|e| CliError::csv(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    csv::Reader::from_reader(file).deserialize().map(|r| r.map_err(|e| CliError::csv(path, e))).collect()
}

/// The CSV text with every wall-clock column removed, for comparing runs.
pub fn without_wall_clock(text: &str) -> String {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut keep: Vec<bool> = Vec::new();
    let mut out = String::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.expect("CSV written by this crate");
        if i == 0 {
            keep = rec.iter().map(|c| !is_wall_clock(c)).collect();
        }
        let fields: Vec<&str> = rec.iter().zip(&keep).filter(|(_, k)| **k).map(|(f, _)| f).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// File-name-safe spelling of a format descriptor.
pub fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '.' {
            out.push(c);
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_end_matches('-').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_header_matches_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_rows(&p, &[MetricRow::default()], None).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRIC_COLUMNS.join(","));
        assert_eq!(read_rows::<MetricRow>(&p).unwrap(), [MetricRow::default()]);
        write_rows::<MetricRow>(&p, &[], Some(&METRIC_COLUMNS)).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().trim(), METRIC_COLUMNS.join(","));
    }

    #[test]
    fn wall_clock_columns() {
        assert!(is_wall_clock("t_local_ms") && is_wall_clock("t_epoch_ms_mean"));
        assert!(!is_wall_clock("t_upload_ms") && !is_wall_clock("t_download_ms") && !is_wall_clock("loss"));
        assert_eq!(without_wall_clock("a,t_local_ms,t_upload_ms\n1,2.5,3\n"), "a,t_upload_ms\n1,3\n");
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("float(4,6)"), "float-4-6");
        assert_eq!(slug("int(8,0.5,3)"), "int-8-0.5-3");
        assert_eq!(slug("f64"), "f64");
    }
}
