use std::path::Path;

use clap::Args;
use hetfed_core::mlp::Dataset;
use hetfed_core::numfmt::ScalarFormat;
use hetfed_core::synthdata::{self, DataSpec};

use super::{create_dir, GlobalArgs};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_val: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 5)]
    pub features: usize,
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    pub mean0: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub mean1: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub std: f64,
}

/// Writes `train.csv`, `val.csv` and `test.csv` with header `f0..f{d-1},label`.
pub fn run(global: &GlobalArgs, args: &GenDataArgs) -> Result<(), CliError> {
    let formats = global.formats_or(&[ScalarFormat::F64]);
    let [format] = formats[..] else {
        return Err(CliError::validation("gen-data takes a single --format"));
    };
    let spec = DataSpec {
        n_train: args.n_train,
        n_val: args.n_val,
        n_test: args.n_test,
        features: args.features,
        mean0: args.mean0,
        mean1: args.mean1,
        std: args.std,
        seed: global.seed(),
    };
    let (train, val, test) = synthdata::generate(&spec, format)?;
    create_dir(&global.out)?;
    for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = global.out.join(format!("{name}.csv"));
        write_dataset(&path, set)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let d = data.d();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| CliError::csv(path, e))?;
    let features = data.features().to_f64();
    let labels = data.labels().to_f64();
    let mut buf: Vec<String> = Vec::with_capacity(d + 1);
    for i in 0..data.n() {
        buf.clear();
        buf.extend(features[i * d..(i + 1) * d].iter().map(|v| v.to_string()));
        buf.push(labels[i].to_string());
        w.write_record(&buf).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

