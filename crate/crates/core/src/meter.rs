//! Round-time breakdown, analytic memory accounting, payload sizes and the
//! summary statistics used by the reports.

use alloc::vec::Vec;

use crate::compress::{CompressedState, Mask};
use crate::fedsim::DeviceProfile;
use crate::mlp::{GradientSet, Matrix, MlpModel};
use crate::numfmt::ScalarFormat;

/// Fixed size of a serialized model or gradient header.
pub const HEADER_BYTES: u64 = 64;
/// Scale (f64) plus zero point (u32) stored per affine-coded matrix.
pub const AFFINE_PARAM_BYTES: u64 = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeterError {
    #[error("{field} is out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
}

/// Latency of one device round, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TimeBreakdown {
    pub t_local: f64,
    pub t_upload: f64,
    pub t_global: f64,
    pub t_download: f64,
    pub total: f64,
}

impl TimeBreakdown {
    pub fn new(t_local: f64, t_upload: f64, t_global: f64, t_download: f64) -> Self {
        TimeBreakdown { t_local, t_upload, t_global, t_download, total: t_local + t_upload + t_global + t_download }
    }
}

/// `T = T_local + T_upload + T_global + T_download`, with the local part
/// scaled by the device's slowdown and transfers priced at its bandwidths.
pub fn time_breakdown(
    measured_local: f64,
    profile: &DeviceProfile,
    upload_bytes: u64,
    download_bytes: u64,
    measured_global: f64,
) -> Result<TimeBreakdown, MeterError> {
    for (field, value) in [("measured_local", measured_local), ("measured_global", measured_global)] {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(MeterError::OutOfRange { field, value });
        }
    }
    Ok(TimeBreakdown::new(
        measured_local * profile.slowdown,
        upload_bytes as f64 / profile.up_bw,
        measured_global,
        download_bytes as f64 / profile.down_bw,
    ))
}

/// Bytes of every scalar buffer one full-batch training epoch holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryAccount {
    pub weights_bytes: u64,
    pub biases_bytes: u64,
    pub gradients_bytes: u64,
    pub activations_bytes: u64,
    pub deltas_bytes: u64,
    pub inputs_bytes: u64,
    pub labels_bytes: u64,
    pub total_bytes: u64,
}

pub fn memory_footprint(model: &MlpModel, batch_n: usize, format: ScalarFormat) -> Result<MemoryAccount, MeterError> {
    if batch_n == 0 {
        return Err(MeterError::OutOfRange { field: "batch_n", value: 0.0 });
    }
    let w = format.byte_width();
    let n = batch_n as u64;
    let dims = model.dims();
    let weights = model.weight_count() as u64;
    let biases = (model.param_count() - model.weight_count()) as u64;
    let neurons: u64 = dims[1..].iter().map(|&d| d as u64).sum();
    let mut acc = MemoryAccount {
        weights_bytes: weights * w,
        biases_bytes: biases * w,
        gradients_bytes: (weights + biases) * w,
        activations_bytes: n * neurons * w,
        deltas_bytes: n * neurons * w,
        inputs_bytes: n * dims[0] as u64 * w,
        labels_bytes: n * w,
        total_bytes: 0,
    };
    acc.total_bytes = acc.weights_bytes
        + acc.biases_bytes
        + acc.gradients_bytes
        + acc.activations_bytes
        + acc.deltas_bytes
        + acc.inputs_bytes
        + acc.labels_bytes;
    Ok(acc)
}

fn ceil_log2(k: usize) -> u64 {
    if k <= 1 {
        0
    } else {
        u64::from(usize::BITS - (k - 1).leading_zeros())
    }
}

/// Stored size of one weight matrix: the cheaper of the dense layout and the
/// compressed one (retained values or centroids plus indices, plus the mask
/// when anything is pruned).
fn weight_matrix_bytes(m: &Matrix, mask: Option<&Mask>, k: Option<usize>) -> u64 {
    let width = m.format().byte_width();
    let count = m.len() as u64;
    let dense = count * width;
    let compressed = match mask {
        None => dense,
        Some(mask) => {
            let retained = mask.count_ones() as u64;
            let mask_bytes = if retained < count { count.div_ceil(8) } else { 0 };
            let values = match k {
                Some(k) => k as u64 * width + (retained * ceil_log2(k)).div_ceil(8),
                None => retained * width,
            };
            values + mask_bytes
        }
    };
    let params = if matches!(m.format(), ScalarFormat::Affine(_)) { AFFINE_PARAM_BYTES } else { 0 };
    dense.min(compressed) + params
}

fn layout_bytes(weights: &[Matrix], biases: &[Matrix], state: Option<&CompressedState>) -> u64 {
    let weight_bytes: u64 = weights
        .iter()
        .enumerate()
        .map(|(l, m)| {
            let mask = state.map(|s| &s.masks[l]);
            let k = state.and_then(|s| s.codebooks[l].as_ref()).map(|b| b.k());
            weight_matrix_bytes(m, mask, k)
        })
        .sum();
    let bias_bytes: u64 = biases.iter().map(|b| b.len() as u64 * b.format().byte_width()).sum();
    HEADER_BYTES + weight_bytes + bias_bytes
}

/// Serialized size of a (possibly compressed) model.
pub fn model_payload_bytes(model: &MlpModel, state: Option<&CompressedState>) -> u64 {
    layout_bytes(model.weights(), model.biases(), state)
}

/// Serialized size of a gradient upload shaped by `state`.
pub fn gradient_payload_bytes(grads: &GradientSet, state: Option<&CompressedState>) -> u64 {
    layout_bytes(&grads.weights, &grads.biases, state)
}

/// Mean, median and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let stddev = if n < 2 {
        0.0
    } else {
        libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
    };
    Some(Summary { count: n, mean, median, stddev })
}

/// Least-squares line `y = slope * x + intercept` and its R^2.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, my - slope * mx, r2))
}
