//! JSON session configs and the format-list syntax shared by the commands.
//!
//! ```json
//! {
//!   "global_format": "f64", "rounds": 200, "lr": 1.0, "aggregator": "hetero",
//!   "data": { "n_train": 1000, "seed": 0 },
//!   "devices": [ {}, { "plan": { "prune": 0.5 } }, { "plan": { "format": "f16" } } ]
//! }
//! ```
//!
//! Omitted keys take the defaults below; unknown keys are errors. Values are
//! checked while parsing, so every message carries a line and column.

use std::fmt;
use std::path::Path;

use hetfed_core::compress::CompressionPlan;
use hetfed_core::fedsim::{Aggregator, DeviceProfile, SessionConfig};
use hetfed_core::mlp::layer_dims;
use hetfed_core::numfmt::ScalarFormat;
use hetfed_core::synthdata::DataSpec;
use serde::de::{self, Deserializer};
use serde::Deserialize;

use crate::error::CliError;

/// A format descriptor such as `f32`, `float(5,10)` or `int(8,0.01,128)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Format(pub ScalarFormat);

impl<'de> Deserialize<'de> for Format {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map(Format).map_err(|e| de::Error::custom(format_args!("{e}")))
    }
}

/// A finite real strictly above zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive(pub f64);

impl<'de> Deserialize<'de> for Positive {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if v > 0.0 && v.is_finite() {
            Ok(Positive(v))
        } else {
            Err(de::Error::custom(format_args!("expected a positive number, got {v}")))
        }
    }
}

/// A real in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fraction(pub f64);

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if (0.0..=1.0).contains(&v) {
            Ok(Fraction(v))
        } else {
            Err(de::Error::custom(format_args!("expected a value in [0, 1], got {v}")))
        }
    }
}

/// An integer of at least one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtLeastOne(pub usize);

impl<'de> Deserialize<'de> for AtLeastOne {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match usize::deserialize(d)? {
            0 => Err(de::Error::custom("expected an integer of at least 1")),
            v => Ok(AtLeastOne(v)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorName {
    #[default]
    FedSgd,
    FedAvg,
    Hetero,
}

impl From<AggregatorName> for Aggregator {
    fn from(a: AggregatorName) -> Self {
        match a {
            AggregatorName::FedSgd => Aggregator::FedSgd,
            AggregatorName::FedAvg => Aggregator::FedAvg,
            AggregatorName::Hetero => Aggregator::Hetero,
        }
    }
}

/// How training samples are spread over devices. Only IID is implemented;
/// the label-skew name is reserved and rejected.
#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum PartitionName {
    #[default]
    Iid,
    LabelSkew,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataFile {
    n_train: Option<AtLeastOne>,
    n_val: Option<AtLeastOne>,
    n_test: Option<AtLeastOne>,
    features: Option<AtLeastOne>,
    mean0: Option<f64>,
    mean1: Option<f64>,
    std: Option<Positive>,
    seed: Option<u64>,
}

impl DataFile {
    fn into_spec(self) -> DataSpec {
        let d = DataSpec::default();
        DataSpec {
            n_train: self.n_train.map_or(d.n_train, |v| v.0),
            n_val: self.n_val.map_or(d.n_val, |v| v.0),
            n_test: self.n_test.map_or(d.n_test, |v| v.0),
            features: self.features.map_or(d.features, |v| v.0),
            mean0: self.mean0.unwrap_or(d.mean0),
            mean1: self.mean1.unwrap_or(d.mean1),
            std: self.std.map_or(d.std, |v| v.0),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    prune: Option<Fraction>,
    format: Option<Format>,
    clusters: Option<AtLeastOne>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceFile {
    slowdown: Option<Positive>,
    up_bw: Option<Positive>,
    down_bw: Option<Positive>,
    mem_cap: Option<u64>,
    #[serde(default)]
    plan: PlanFile,
    local_epochs: Option<AtLeastOne>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionFile {
    global_format: Option<Format>,
    rounds: AtLeastOne,
    lr: Option<Positive>,
    #[serde(default)]
    aggregator: AggregatorName,
    #[serde(default)]
    partition: PartitionName,
    data: Option<DataFile>,
    devices: Vec<DeviceFile>,
    hidden_layers: Option<usize>,
    width: Option<AtLeastOne>,
    model_seed: Option<u64>,
}

/// Default hidden-layer count and width of the session model.
pub const DEFAULT_HIDDEN: usize = 5;
pub const DEFAULT_WIDTH: usize = 10;

fn located(path: &str, e: impl fmt::Display) -> CliError {
    CliError::Validation(format!("{path}: {e}"))
}

/// Parses and validates a session config. `name` prefixes error messages.
pub fn parse_session(text: &str, name: &str) -> Result<SessionConfig, CliError> {
    let file: SessionFile = serde_json::from_str(text).map_err(|e| located(name, e))?;
    if file.partition != PartitionName::Iid {
        return Err(located(name, "partition `label_skew` is not implemented; use `iid`"));
    }
    let data = file.data.map(DataFile::into_spec).unwrap_or_default();
    let defaults = DeviceProfile::default();
    let devices = file
        .devices
        .into_iter()
        .enumerate()
        .map(|(id, d)| DeviceProfile {
            id,
            slowdown: d.slowdown.map_or(defaults.slowdown, |v| v.0),
            up_bw: d.up_bw.map_or(defaults.up_bw, |v| v.0),
            down_bw: d.down_bw.map_or(defaults.down_bw, |v| v.0),
            mem_cap: d.mem_cap.unwrap_or(defaults.mem_cap),
            plan: CompressionPlan {
                prune_ratio: d.plan.prune.map_or(0.0, |v| v.0),
                target_format: d.plan.format.map(|f| f.0),
                cluster_k: d.plan.clusters.map(|v| v.0),
            },
            local_epochs: d.local_epochs.map_or(defaults.local_epochs, |v| v.0),
            seed: d.seed.unwrap_or(id as u64),
        })
        .collect();
    let cfg = SessionConfig {
        global_format: file.global_format.map_or(ScalarFormat::F64, |f| f.0),
        rounds: file.rounds.0,
        lr: file.lr.map_or(0.5, |v| v.0),
        aggregator: file.aggregator.into(),
        dims: layer_dims(
            data.features,
            file.hidden_layers.unwrap_or(DEFAULT_HIDDEN),
            file.width.map_or(DEFAULT_WIDTH, |v| v.0),
        ),
        model_seed: file.model_seed.unwrap_or(data.seed),
        data,
        devices,
    };
    cfg.validate().map_err(|e| located(name, e))?;
    Ok(cfg)
}

pub fn load_session(path: &Path) -> Result<SessionConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_session(&text, &path.display().to_string())
}

/// Splits `f64,float(5,10),f32` on the commas outside parentheses.
pub fn parse_format_list(list: &str) -> Result<Vec<ScalarFormat>, String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    let mut push = |item: &str| -> Result<(), String> {
        let item = item.trim();
        item.parse().map(|f| out.push(f)).map_err(|e| format!("{e}"))
    };
    for (i, c) in list.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                push(&list[start..i])?;
                start = i + 1;
            }
            _ => {}
        }
    }
    push(&list[start..])?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse_session(r#"{"rounds": 3, "devices": [{}]}"#, "t").unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.devices.len(), 1);
        assert_eq!(cfg.devices[0], DeviceProfile::default());
        assert_eq!(cfg.data, DataSpec::default());
        assert_eq!(cfg.dims, [5, 10, 10, 10, 10, 10, 1]);
        assert_eq!(cfg.aggregator, Aggregator::FedSgd);
    }

    #[test]
    fn full_config() {
        let text = r#"{
            "global_format": "f32", "rounds": 10, "lr": 1.0, "aggregator": "hetero",
            "data": {"n_train": 400, "n_val": 100, "n_test": 100, "std": 0.5, "seed": 9},
            "devices": [
                {"slowdown": 2.0, "up_bw": 5e5, "mem_cap": 1000000},
                {"plan": {"prune": 0.5, "format": "float(5,10)", "clusters": 4}, "local_epochs": 3, "seed": 77}
            ],
            "hidden_layers": 5, "model_seed": 4
        }"#;
        let cfg = parse_session(text, "t").unwrap();
        assert_eq!(cfg.global_format, ScalarFormat::F32);
        assert_eq!(cfg.dims.len(), 7);
        assert_eq!(cfg.model_seed, 4);
        assert_eq!(cfg.devices[1].id, 1);
        assert_eq!(cfg.devices[1].seed, 77);
        assert_eq!(cfg.devices[1].plan.target_format, Some(ScalarFormat::F16));
        assert_eq!(cfg.devices[0].up_bw, 5e5);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("{\n\"rounds\": 3,\n\"devices\": [{}],\n\"bogus\": 1\n}", "line 4"),
            ("{\n\"rounds\": 3,\n\"devices\": [\n{\"slowdown\": -1}\n]\n}", "line 4"),
            ("{\n\"rounds\": 3,\n\"devices\": [{\"plan\": {\n\"format\": \"f99\"}}]\n}", "line 4"),
            ("{\n\"rounds\": 3,\n\"devices\": [{}]\n", "line 4"),
            ("{\n\"devices\": [{}]\n}", "rounds"),
        ];
        for (text, needle) in cases {
            let msg = parse_session(text, "cfg.json").unwrap_err().to_string();
            assert!(msg.starts_with("cfg.json: ") && msg.contains(needle), "{msg}");
        }
    }

    #[test]
    fn cross_field_checks_apply() {
        for text in [
            r#"{"rounds": 1, "devices": []}"#,
            r#"{"rounds": 1, "devices": [{}, {}], "data": {"n_train": 1}}"#,
            r#"{"rounds": 1, "devices": [{}], "partition": "label_skew"}"#,
        ] {
            assert!(matches!(parse_session(text, "t"), Err(CliError::Validation(_))), "{text}");
        }
    }

    #[test]
    fn format_lists() {
        let v = parse_format_list("f64, float(5,10),int(8,0.5,3)").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[1], ScalarFormat::F16);
        assert!(parse_format_list("f64,,f32").is_err());
        assert!(parse_format_list("f99").is_err());
    }
}
