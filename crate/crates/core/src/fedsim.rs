//! Federated round loop: broadcast, compressed local training, upload,
//! aggregation and global update.
//!
//! All three aggregators share one reduction. For every parameter position
//! the covering devices are visited in ascending id; device `i` contributes
//! `(n_i / N) * g_i`, where `N` sums the sample counts of the devices
//! covering that position and the ratio is rounded once into the global
//! format. Positions nobody covers aggregate to 0.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::compress::{self, apply_plan, full_mask, CompressError, CompressedState, CompressionPlan, Mask};
use crate::kernel::{with_kernel, Exec, Kernel};
use crate::meter::{self, MemoryAccount, MeterError, TimeBreakdown};
use crate::mlp::{self, Dataset, GradientSet, Matrix, MlpError, MlpModel};
use crate::numfmt::{self, soft, ArithOp, ScalarFormat};
use crate::rng::SeededRng;
use crate::synthdata::{self, DataError, DataSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FedError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("{field} is out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("no device updates to aggregate")]
    EmptyUpdateSet,
    #[error("update shapes disagree")]
    ShapeMismatch,
    #[error("compressed state does not match its update")]
    StateMismatch,
    #[error("device {device} needs {required} bytes but has {cap}")]
    MemoryExceeded { device: usize, required: u64, cap: u64 },
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Meter(#[from] MeterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregator {
    #[default]
    FedSgd,
    FedAvg,
    Hetero,
}

/// Simulated capabilities of one device.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceProfile {
    pub id: usize,
    /// Multiplier applied to the measured local compute time.
    pub slowdown: f64,
    /// Bytes per second.
    pub up_bw: f64,
    pub down_bw: f64,
    pub mem_cap: u64,
    pub plan: CompressionPlan,
    pub local_epochs: usize,
    pub seed: u64,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        DeviceProfile {
            id: 0,
            slowdown: 1.0,
            up_bw: 1e6,
            down_bw: 1e6,
            mem_cap: u64::MAX,
            plan: CompressionPlan::none(),
            local_epochs: 1,
            seed: 0,
        }
    }
}

/// Wall-clock source in seconds; the core never reads the OS clock itself.
pub trait Clock: Sync {
    fn now(&self) -> f64;
}

/// Reports every instant as 0, so all measured times are 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// Runs independent per-device jobs; results come back in index order.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Gradients(GradientSet),
    Parameters(MlpModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceUpdate {
    pub device_id: usize,
    pub payload: Payload,
    pub sample_count: usize,
    /// Per weight matrix, the positions this device trains.
    pub coverage: Vec<Mask>,
    pub payload_bytes: u64,
    /// Size of the compressed model the device received.
    pub download_bytes: u64,
    pub memory: MemoryAccount,
    /// Measured wall time of local training, seconds, before slowdown.
    pub local_seconds: f64,
    /// Loss before the first local update.
    pub loss: f64,
    pub epochs: usize,
    pub state: CompressedState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceRound {
    pub device_id: usize,
    pub time: TimeBreakdown,
    pub memory: MemoryAccount,
    pub payload_up_bytes: u64,
    pub payload_down_bytes: u64,
    pub loss: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skip {
    pub device_id: usize,
    pub required: u64,
    pub cap: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub accuracy: f64,
    pub devices: Vec<DeviceRound>,
    pub skipped: Vec<Skip>,
    /// Per weight matrix, how many devices covered each position.
    pub coverage: Vec<Vec<u32>>,
    pub t_global: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub global_format: ScalarFormat,
    pub rounds: usize,
    pub lr: f64,
    pub aggregator: Aggregator,
    pub data: DataSpec,
    pub devices: Vec<DeviceProfile>,
    pub dims: Vec<usize>,
    pub model_seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            global_format: ScalarFormat::F64,
            rounds: 1,
            lr: 0.5,
            aggregator: Aggregator::FedSgd,
            data: DataSpec::default(),
            devices: vec![DeviceProfile::default()],
            dims: mlp::default_dims(),
            model_seed: 0,
        }
    }
}

fn config_err(msg: impl Into<String>) -> FedError {
    FedError::Config(msg.into())
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        use alloc::format;
        self.data.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(config_err(format!("lr must be positive, got {}", self.lr)));
        }
        if self.devices.is_empty() {
            return Err(config_err("at least one device is required"));
        }
        if self.devices.len() > self.data.n_train {
            return Err(config_err("more devices than training samples"));
        }
        if self.dims.first() != Some(&self.data.features) || self.dims.last() != Some(&1) {
            return Err(config_err("layer dims must start at the feature count and end in one output"));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(config_err("zero-width layer"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.id != i {
                return Err(config_err(format!("device ids must be 0..n in order; found {} at {}", d.id, i)));
            }
            if !(d.slowdown > 0.0) || !d.slowdown.is_finite() {
                return Err(config_err(format!("device {i}: slowdown must be positive")));
            }
            if !(d.up_bw > 0.0 && d.down_bw > 0.0) {
                return Err(config_err(format!("device {i}: bandwidths must be positive")));
            }
            if d.local_epochs == 0 {
                return Err(config_err(format!("device {i}: local_epochs must be at least 1")));
            }
            d.plan.validate().map_err(|e| config_err(format!("device {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Seeded IID split: a shuffle assigns samples to devices round-robin, and
/// each part keeps the original sample order. Sizes differ by at most one.
pub fn partition(data: &Dataset, n_devices: usize, seed: u64) -> Result<Vec<Dataset>, FedError> {
    if n_devices == 0 || n_devices > data.n() {
        return Err(FedError::OutOfRange { field: "n_devices", value: n_devices as f64 });
    }
    let mut order: Vec<usize> = (0..data.n()).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let mut owner = vec![0usize; data.n()];
    for (slot, &sample) in order.iter().enumerate() {
        owner[sample] = slot % n_devices;
    }
    Ok((0..n_devices)
        .map(|d| {
            let idx: Vec<usize> = (0..data.n()).filter(|&i| owner[i] == d).collect();
            data.select(&idx)
        })
        .collect())
}

/// Format a device computes in under `plan`.
pub fn local_format(plan: &CompressionPlan, global: ScalarFormat) -> ScalarFormat {
    match plan.target_format {
        Some(f @ ScalarFormat::Float(_)) => f,
        _ => global,
    }
}

fn train_local(
    mut local: MlpModel,
    state: &CompressedState,
    part: &Dataset,
    lr: f64,
    epochs: usize,
) -> Result<(MlpModel, f64), FedError> {
    let mut first_loss = None;
    for _ in 0..epochs {
        let (g, loss) = mlp::gradients(&local, part)?;
        first_loss.get_or_insert(loss);
        let g = compress::project(&g, state)?;
        local = mlp::apply_update(&local, &g, lr)?;
    }
    Ok((local, first_loss.unwrap_or(f64::NAN)))
}

fn matrix_delta(before: &Matrix, after: &Matrix, lr: f64, fmt: ScalarFormat) -> Matrix {
    let lr_e = numfmt::encode_total(lr, fmt);
    let data = before
        .bits()
        .iter()
        .zip(after.bits())
        .map(|(&b, &a)| {
            let diff = numfmt::arith_bits(ArithOp::Sub, b, before.format(), a, after.format(), fmt);
            numfmt::arith_bits(ArithOp::Div, diff, fmt, lr_e, fmt, fmt)
        })
        .collect();
    Matrix::from_bits(before.rows(), before.cols(), data, fmt).expect("same shape")
}

/// `(w_before - w_after) / lr` in the compute format.
pub fn pseudo_gradient(before: &MlpModel, after: &MlpModel, lr: f64, sample_count: usize) -> GradientSet {
    let fmt = before.format();
    GradientSet {
        weights: before.weights().iter().zip(after.weights()).map(|(b, a)| matrix_delta(b, a, lr, fmt)).collect(),
        biases: before.biases().iter().zip(after.biases()).map(|(b, a)| matrix_delta(b, a, lr, fmt)).collect(),
        sample_count,
    }
}

/// One device's work for a round: compress the broadcast model, train on the
/// local part and package the upload.
pub fn local_step(
    device: &DeviceProfile,
    global: &MlpModel,
    part: &Dataset,
    lr: f64,
    aggregator: Aggregator,
    round_seed: u64,
    clock: &dyn Clock,
) -> Result<DeviceUpdate, FedError> {
    if part.is_empty() {
        return Err(MlpError::EmptyDataset.into());
    }
    let (local, state) = apply_plan(global, &device.plan, device.seed.wrapping_add(round_seed))?;
    let memory = meter::memory_footprint(&local, part.n(), local.format())?;
    let download_bytes = meter::model_payload_bytes(&local, Some(&state));
    if memory.total_bytes > device.mem_cap {
        return Err(FedError::MemoryExceeded { device: device.id, required: memory.total_bytes, cap: device.mem_cap });
    }
    let data = if part.format() == local.format() { part.clone() } else { part.convert(local.format()) };
    let n = part.n();
    let start = clock.now();
    let (payload, loss, epochs) = match aggregator {
        Aggregator::FedSgd => {
            let (g, loss) = mlp::gradients(&local, &data)?;
            (Payload::Gradients(compress::project(&g, &state)?), loss, 1)
        }
        Aggregator::Hetero if device.local_epochs == 1 => {
            let (g, loss) = mlp::gradients(&local, &data)?;
            (Payload::Gradients(compress::project(&g, &state)?), loss, 1)
        }
        Aggregator::Hetero => {
            let (after, loss) = train_local(local.clone(), &state, &data, lr, device.local_epochs)?;
            (Payload::Gradients(pseudo_gradient(&local, &after, lr, n)), loss, device.local_epochs)
        }
        Aggregator::FedAvg => {
            let (after, loss) = train_local(local.clone(), &state, &data, lr, device.local_epochs)?;
            (Payload::Parameters(after), loss, device.local_epochs)
        }
    };
    let local_seconds = (clock.now() - start).max(0.0);
    let payload_bytes = match &payload {
        Payload::Gradients(g) => meter::gradient_payload_bytes(g, Some(&state)),
        Payload::Parameters(m) => meter::model_payload_bytes(m, Some(&state)),
    };
    let coverage = match aggregator {
        Aggregator::Hetero => state.masks.clone(),
        _ => global.weights().iter().map(|w| full_mask(w.len())).collect(),
    };
    Ok(DeviceUpdate {
        device_id: device.id,
        payload,
        sample_count: n,
        coverage,
        payload_bytes,
        download_bytes,
        memory,
        local_seconds,
        loss,
        epochs,
        state,
    })
}

/// `n / total` rounded once into `fmt`.
fn ratio(n: u64, total: u64, fmt: ScalarFormat) -> u64 {
    match fmt {
        ScalarFormat::Float(ff) => {
            let f64f = numfmt::FloatFormat::BINARY64;
            soft::div(f64f.unpack((n as f64).to_bits()), f64f.unpack((total as f64).to_bits()), ff)
        }
        ScalarFormat::Affine(_) => numfmt::encode_total(n as f64 / total as f64, fmt),
    }
}

struct Contribution<'a> {
    blocks: Vec<&'a Matrix>,
    count: u64,
    coverage: Option<&'a [Mask]>,
}

/// The shared reduction. Every contribution's blocks are already in `fmt`.
fn weighted_mean(parts: &[Contribution<'_>], weight_blocks: usize, fmt: ScalarFormat) -> Vec<Matrix> {
    let nblocks = parts[0].blocks.len();
    let mut out = Vec::with_capacity(nblocks);
    for b in 0..nblocks {
        let shape = parts[0].blocks[b];
        let mut data = vec![numfmt::encode_total(0.0, fmt); shape.len()];
        let covers = |p: &Contribution<'_>, j: usize| b >= weight_blocks || p.coverage.map_or(true, |c| c[b][j]);
        with_kernel!(fmt, Exec::Auto, |k| {
            for (j, slot) in data.iter_mut().enumerate() {
                let total: u64 = parts.iter().filter(|p| covers(p, j)).map(|p| p.count).sum();
                if total == 0 {
                    continue;
                }
                let mut acc = None;
                for p in parts.iter().filter(|p| covers(p, j)) {
                    let term = k.mul(k.load(ratio(p.count, total, fmt)), k.load(p.blocks[b].bits()[j]));
                    acc = Some(match acc {
                        None => term,
                        Some(a) => k.add(a, term),
                    });
                }
                *slot = k.store(acc.expect("total > 0 implies a coverer"));
            }
        });
        out.push(Matrix::from_bits(shape.rows(), shape.cols(), data, fmt).expect("same shape"));
    }
    out
}

fn sorted_by_id(updates: &[DeviceUpdate]) -> Result<Vec<&DeviceUpdate>, FedError> {
    if updates.is_empty() {
        return Err(FedError::EmptyUpdateSet);
    }
    let mut sorted: Vec<&DeviceUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.device_id);
    Ok(sorted)
}

fn gradient_payload(u: &DeviceUpdate) -> Result<&GradientSet, FedError> {
    match &u.payload {
        Payload::Gradients(g) => Ok(g),
        Payload::Parameters(_) => Err(FedError::ShapeMismatch),
    }
}

fn same_shapes(a: &[Matrix], b: &[Matrix]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.rows() == y.rows() && x.cols() == y.cols())
}

fn reduce_gradients(updates: &[DeviceUpdate], fmt: ScalarFormat, use_coverage: bool) -> Result<GradientSet, FedError> {
    let sorted = sorted_by_id(updates)?;
    let converted: Vec<GradientSet> =
        sorted.iter().map(|u| gradient_payload(u).map(|g| g.convert(fmt))).collect::<Result<_, _>>()?;
    let first = &converted[0];
    if converted.iter().any(|g| !same_shapes(&g.weights, &first.weights) || !same_shapes(&g.biases, &first.biases)) {
        return Err(FedError::ShapeMismatch);
    }
    if use_coverage
        && sorted.iter().any(|u| u.coverage.len() != first.weights.len()
            || u.coverage.iter().zip(&first.weights).any(|(c, w)| c.len() != w.len()))
    {
        return Err(FedError::StateMismatch);
    }
    let parts: Vec<Contribution<'_>> = sorted
        .iter()
        .zip(&converted)
        .map(|(u, g)| Contribution {
            blocks: g.weights.iter().chain(&g.biases).collect(),
            count: u.sample_count as u64,
            coverage: if use_coverage { Some(&u.coverage) } else { None },
        })
        .collect();
    let nw = first.weights.len();
    let mut blocks = weighted_mean(&parts, nw, fmt);
    let biases = blocks.split_off(nw);
    Ok(GradientSet { weights: blocks, biases, sample_count: sorted.iter().map(|u| u.sample_count).sum() })
}

/// Sample-count-weighted mean gradient over all devices.
pub fn fedsgd_aggregate(updates: &[DeviceUpdate], global_format: ScalarFormat) -> Result<GradientSet, FedError> {
    reduce_gradients(updates, global_format, false)
}

/// Coverage-weighted mean: each weight position averages only the devices
/// whose compressed model retains it.
pub fn hetero_aggregate(updates: &[DeviceUpdate], global_format: ScalarFormat) -> Result<GradientSet, FedError> {
    for u in updates {
        let g = gradient_payload(u)?;
        if u.state.masks.len() != g.weights.len() {
            return Err(FedError::StateMismatch);
        }
    }
    let expanded: Vec<DeviceUpdate> = updates
        .iter()
        .map(|u| {
            let (g, cov) = compress::expand(gradient_payload(u)?, &u.state).map_err(|_| FedError::StateMismatch)?;
            let coverage = cov.iter().zip(&u.coverage).map(|(a, b)| a.clone() & b.clone()).collect();
            Ok(DeviceUpdate { payload: Payload::Gradients(g), coverage, ..u.clone() })
        })
        .collect::<Result<_, FedError>>()?;
    reduce_gradients(&expanded, global_format, true)
}

/// Sample-count-weighted mean of the local models' parameters.
pub fn fedavg_aggregate(updates: &[DeviceUpdate], global: &MlpModel) -> Result<MlpModel, FedError> {
    let sorted = sorted_by_id(updates)?;
    let fmt = global.format();
    let mut converted = Vec::with_capacity(sorted.len());
    for u in &sorted {
        match &u.payload {
            Payload::Parameters(m) => {
                if !same_shapes(m.weights(), global.weights()) || !same_shapes(m.biases(), global.biases()) {
                    return Err(FedError::ShapeMismatch);
                }
                let ws: Vec<Matrix> = m.weights().iter().chain(m.biases()).map(|x| x.convert(fmt)).collect();
                converted.push(ws);
            }
            Payload::Gradients(_) => return Err(FedError::ShapeMismatch),
        }
    }
    let parts: Vec<Contribution<'_>> = sorted
        .iter()
        .zip(&converted)
        .map(|(u, blocks)| Contribution { blocks: blocks.iter().collect(), count: u.sample_count as u64, coverage: None })
        .collect();
    let nw = global.layers();
    let mut blocks = weighted_mean(&parts, nw, fmt);
    let biases = blocks.split_off(nw);
    Ok(MlpModel::from_parts(global.dims().to_vec(), blocks, biases, fmt)?)
}

/// Everything a finished session produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionResult {
    pub reports: Vec<RoundReport>,
    pub model: MlpModel,
    pub test_accuracy: f64,
}

/// Per-round observer; lets callers stream results instead of buffering.
pub trait RoundSink {
    fn round(&mut self, report: &RoundReport);
}

impl RoundSink for () {
    fn round(&mut self, _: &RoundReport) {}
}

pub fn run_session(cfg: &SessionConfig, exec: &impl Executor, clock: &dyn Clock) -> Result<SessionResult, FedError> {
    run_session_with(cfg, exec, clock, &mut ())
}

pub fn run_session_with(
    cfg: &SessionConfig,
    exec: &impl Executor,
    clock: &dyn Clock,
    sink: &mut dyn RoundSink,
) -> Result<SessionResult, FedError> {
    cfg.validate()?;
    let (train, val, test) = synthdata::generate(&cfg.data, cfg.global_format)?;
    let parts = partition(&train, cfg.devices.len(), cfg.data.seed)?;
    let mut global = mlp::init_model(&cfg.dims, cfg.global_format, cfg.model_seed)?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let results = exec.map(cfg.devices.len(), |i| {
            let d = &cfg.devices[i];
            local_step(d, &global, &parts[i], cfg.lr, cfg.aggregator, round as u64, clock)
        });
        let mut updates = Vec::new();
        let mut skipped = Vec::new();
        for r in results {
            match r {
                Ok(u) => updates.push(u),
                Err(FedError::MemoryExceeded { device, required, cap }) => {
                    skipped.push(Skip { device_id: device, required, cap })
                }
                Err(e) => return Err(e),
            }
        }
        let start = clock.now();
        if !updates.is_empty() {
            global = match cfg.aggregator {
                Aggregator::FedSgd => mlp::apply_update(&global, &fedsgd_aggregate(&updates, cfg.global_format)?, cfg.lr)?,
                Aggregator::Hetero => mlp::apply_update(&global, &hetero_aggregate(&updates, cfg.global_format)?, cfg.lr)?,
                Aggregator::FedAvg => fedavg_aggregate(&updates, &global)?,
            };
        }
        let t_global = (clock.now() - start).max(0.0);
        let accuracy = mlp::evaluate(&global, &val)?;
        let mut coverage: Vec<Vec<u32>> = global.weights().iter().map(|w| vec![0; w.len()]).collect();
        let mut devices = Vec::with_capacity(updates.len());
        for u in &updates {
            for (counts, mask) in coverage.iter_mut().zip(&u.coverage) {
                for j in mask.iter_ones() {
                    counts[j] += 1;
                }
            }
            let profile = &cfg.devices[u.device_id];
            let time = meter::time_breakdown(u.local_seconds, profile, u.payload_bytes, u.download_bytes, t_global)?;
            devices.push(DeviceRound {
                device_id: u.device_id,
                time,
                memory: u.memory,
                payload_up_bytes: u.payload_bytes,
                payload_down_bytes: u.download_bytes,
                loss: u.loss,
                epochs: u.epochs,
            });
        }
        let report = RoundReport { round, accuracy, devices, skipped, coverage, t_global };
        sink.round(&report);
        reports.push(report);
    }
    let test_accuracy = mlp::evaluate(&global, &test)?;
    Ok(SessionResult { reports, model: global, test_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{default_dims, init_model};

    fn spec(n_train: usize) -> DataSpec {
        DataSpec { n_train, n_val: 200, n_test: 200, seed: 4, ..DataSpec::default() }
    }

    fn grads_filled(model: &MlpModel, value: f64) -> GradientSet {
        let fill = |m: &Matrix| Matrix::from_f64(m.rows(), m.cols(), &vec![value; m.len()], ScalarFormat::F64).unwrap();
        GradientSet {
            weights: model.weights().iter().map(fill).collect(),
            biases: model.biases().iter().map(fill).collect(),
            sample_count: 1,
        }
    }

    fn update(id: usize, model: &MlpModel, payload: Payload, n: usize, state: CompressedState) -> DeviceUpdate {
        DeviceUpdate {
            device_id: id,
            payload,
            sample_count: n,
            coverage: state.masks.clone(),
            payload_bytes: 0,
            download_bytes: 0,
            memory: meter::memory_footprint(model, 1, ScalarFormat::F64).unwrap(),
            local_seconds: 0.0,
            loss: 0.0,
            epochs: 1,
            state,
        }
    }

    #[test]
    fn partition_examples() {
        let (train, _, _) = synthdata::generate(&spec(1000), ScalarFormat::F64).unwrap();
        assert_eq!(partition(&train, 1, 9).unwrap()[0], train);
        let parts = partition(&train, 4, 9).unwrap();
        assert!(parts.iter().all(|p| p.n() == 250));
        assert_eq!(parts, partition(&train, 4, 9).unwrap());
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for p in &parts {
            for i in 0..p.n() {
                rows.push(p.features().bits()[i * 5..i * 5 + 5].to_vec());
            }
        }
        let mut original: Vec<Vec<u64>> = (0..1000).map(|i| train.features().bits()[i * 5..i * 5 + 5].to_vec()).collect();
        rows.sort();
        original.sort();
        assert_eq!(rows, original);
        let odd = partition(&train.select(&(0..10).collect::<Vec<_>>()), 3, 1).unwrap();
        assert_eq!(odd.iter().map(Dataset::n).collect::<Vec<_>>(), [4, 3, 3]);
        assert!(partition(&train, 1001, 0).is_err());
    }

    #[test]
    fn local_step_examples() {
        let (train, _, _) = synthdata::generate(&spec(100), ScalarFormat::F64).unwrap();
        let global = init_model(&default_dims(), ScalarFormat::F64, 2).unwrap();
        let dev = DeviceProfile::default();
        let u = local_step(&dev, &global, &train, 0.5, Aggregator::FedSgd, 1, &NoClock).unwrap();
        assert_eq!(u.payload, Payload::Gradients(mlp::gradients(&global, &train).unwrap().0));

        let pruned = DeviceProfile { plan: CompressionPlan::prune(1.0), ..DeviceProfile::default() };
        let u = local_step(&pruned, &global, &train, 0.5, Aggregator::Hetero, 1, &NoClock).unwrap();
        let Payload::Gradients(g) = &u.payload else { panic!() };
        assert!(g.weights.iter().all(|m| m.to_f64().iter().all(|&v| v == 0.0)));
        assert!(u.coverage.iter().all(|m| m.not_any()));

        let plan = CompressionPlan { prune_ratio: 0.3, target_format: Some(ScalarFormat::F16), cluster_k: None };
        let dev = DeviceProfile { plan, ..DeviceProfile::default() };
        let a = local_step(&dev, &global, &train, 0.5, Aggregator::Hetero, 1, &NoClock).unwrap();
        let b = local_step(&dev, &global, &train, 0.5, Aggregator::FedSgd, 1, &NoClock).unwrap();
        assert_eq!(a.payload, b.payload);

        let tight = DeviceProfile { mem_cap: 1000, ..DeviceProfile::default() };
        assert!(matches!(
            local_step(&tight, &global, &train, 0.5, Aggregator::FedSgd, 1, &NoClock),
            Err(FedError::MemoryExceeded { .. })
        ));
    }

    #[test]
    fn multi_epoch_training_keeps_compression() {
        let (train, _, _) = synthdata::generate(&spec(60), ScalarFormat::F64).unwrap();
        let global = init_model(&default_dims(), ScalarFormat::F64, 2).unwrap();
        let plan = CompressionPlan { prune_ratio: 0.5, target_format: Some(ScalarFormat::F32), cluster_k: Some(3) };
        let dev = DeviceProfile { plan, local_epochs: 4, ..DeviceProfile::default() };
        let u = local_step(&dev, &global, &train, 0.5, Aggregator::FedAvg, 1, &NoClock).unwrap();
        let Payload::Parameters(m) = &u.payload else { panic!() };
        for (l, w) in m.weights().iter().enumerate() {
            let book = u.state.codebooks[l].as_ref().unwrap();
            let assignment = book.assignment(&u.state.masks[l]);
            for c in 0..book.k() as u32 {
                let vals: Vec<u64> = (0..w.len()).filter(|&i| assignment[i] == Some(c)).map(|i| w.bits()[i]).collect();
                assert!(vals.iter().all(|&v| v == vals[0]));
            }
            for i in u.state.masks[l].iter_zeros() {
                assert_eq!(w.value(i), 0.0);
            }
        }
        let h = local_step(&dev, &global, &train, 0.5, Aggregator::Hetero, 1, &NoClock).unwrap();
        assert_eq!(h.epochs, 4);
    }

    #[test]
    fn fedsgd_examples() {
        let m = init_model(&[2, 2, 1], ScalarFormat::F64, 0).unwrap();
        let id = CompressedState::identity(&m);
        let g = grads_filled(&m, 0.3);
        let one = [update(0, &m, Payload::Gradients(g.clone()), 7, id.clone())];
        let agg = fedsgd_aggregate(&one, ScalarFormat::F64).unwrap();
        assert_eq!(agg.weights, g.weights);
        let pair = [
            update(0, &m, Payload::Gradients(grads_filled(&m, 0.3)), 5, id.clone()),
            update(1, &m, Payload::Gradients(grads_filled(&m, -0.3)), 5, id.clone()),
        ];
        assert!(fedsgd_aggregate(&pair, ScalarFormat::F64).unwrap().weights[0].to_f64().iter().all(|&v| v == 0.0));
        let pair = [
            update(1, &m, Payload::Gradients(grads_filled(&m, 2.0)), 300, id.clone()),
            update(0, &m, Payload::Gradients(grads_filled(&m, 1.0)), 100, id.clone()),
        ];
        let agg = fedsgd_aggregate(&pair, ScalarFormat::F64).unwrap();
        assert!(agg.weights[0].to_f64().iter().all(|&v| v == 1.75));
        assert_eq!(fedsgd_aggregate(&[], ScalarFormat::F64), Err(FedError::EmptyUpdateSet));
    }

    #[test]
    fn fedavg_examples() {
        let m = init_model(&[2, 2, 1], ScalarFormat::F64, 0).unwrap();
        let id = CompressedState::identity(&m);
        let same = [
            update(0, &m, Payload::Parameters(m.clone()), 3, id.clone()),
            update(1, &m, Payload::Parameters(m.clone()), 9, id.clone()),
        ];
        let avg = fedavg_aggregate(&same, &m).unwrap();
        for (a, b) in avg.weights().iter().zip(m.weights()) {
            for (x, y) in a.to_f64().iter().zip(b.to_f64()) {
                assert!((x - y).abs() <= y.abs() * 1e-15);
            }
        }
        let zeros = quantize_like(&m, 0.0);
        let ones = quantize_like(&m, 1.0);
        let pair = [
            update(0, &m, Payload::Parameters(zeros), 4, id.clone()),
            update(1, &m, Payload::Parameters(ones), 4, id.clone()),
        ];
        assert!(fedavg_aggregate(&pair, &m).unwrap().weights()[0].to_f64().iter().all(|&v| v == 0.5));
        let single = [update(0, &m, Payload::Parameters(quantize_like(&m, 0.25)), 4, id)];
        assert_eq!(fedavg_aggregate(&single, &m).unwrap(), quantize_like(&m, 0.25));
    }

    fn quantize_like(m: &MlpModel, v: f64) -> MlpModel {
        let g = grads_filled(m, v);
        MlpModel::from_parts(m.dims().to_vec(), g.weights, g.biases, ScalarFormat::F64).unwrap()
    }

    #[test]
    fn hetero_examples() {
        let m = init_model(&[2, 2, 1], ScalarFormat::F64, 0).unwrap();
        let id = CompressedState::identity(&m);
        let ups: Vec<DeviceUpdate> = (0..3)
            .map(|i| update(i, &m, Payload::Gradients(grads_filled(&m, 0.1 * (i + 1) as f64)), 10 + i, id.clone()))
            .collect();
        assert_eq!(hetero_aggregate(&ups, ScalarFormat::F64).unwrap(), fedsgd_aggregate(&ups, ScalarFormat::F64).unwrap());

        // position 1 of layer 0 only kept by device 2
        let mut ups = ups;
        for u in ups.iter_mut().take(2) {
            u.state.masks[0].set(1, false);
            u.coverage = u.state.masks.clone();
        }
        let agg = hetero_aggregate(&ups, ScalarFormat::F64).unwrap();
        assert_eq!(agg.weights[0].value(1), 0.1 * 3.0);

        // complementary masks stitch
        let mut a = id.clone();
        let mut b = id.clone();
        for j in 0..4 {
            a.masks[0].set(j, j % 2 == 0);
            b.masks[0].set(j, j % 2 == 1);
        }
        let ga = grads_filled(&m, 1.0);
        let gb = grads_filled(&m, 2.0);
        let ups = [update(0, &m, Payload::Gradients(ga), 5, a), update(1, &m, Payload::Gradients(gb), 5, b)];
        let agg = hetero_aggregate(&ups, ScalarFormat::F64).unwrap();
        assert_eq!(agg.weights[0].to_f64(), [1.0, 2.0, 1.0, 2.0]);
        assert!(agg.weights[1].to_f64().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn single_device_session_is_centralized_training() {
        let cfg = SessionConfig { rounds: 5, data: spec(80), model_seed: 3, ..SessionConfig::default() };
        let out = run_session(&cfg, &Sequential, &NoClock).unwrap();
        let (train, val, _) = synthdata::generate(&cfg.data, ScalarFormat::F64).unwrap();
        let mut m = init_model(&cfg.dims, ScalarFormat::F64, 3).unwrap();
        for r in 0..5 {
            m = mlp::train_epoch(&m, &train, 0.5).unwrap().0;
            assert_eq!(out.reports[r].accuracy, mlp::evaluate(&m, &val).unwrap());
        }
        assert_eq!(out.model, m);

        let none = run_session(&SessionConfig { rounds: 0, ..cfg.clone() }, &Sequential, &NoClock).unwrap();
        assert!(none.reports.is_empty());
        assert_eq!(none.model, init_model(&cfg.dims, ScalarFormat::F64, 3).unwrap());
    }

    #[test]
    fn skipped_devices_are_reported() {
        let mut devices: Vec<DeviceProfile> = (0..2).map(|i| DeviceProfile { id: i, ..DeviceProfile::default() }).collect();
        devices[1].mem_cap = 10;
        let cfg = SessionConfig { rounds: 2, data: spec(40), devices, aggregator: Aggregator::Hetero, ..SessionConfig::default() };
        let out = run_session(&cfg, &Sequential, &NoClock).unwrap();
        for r in &out.reports {
            assert_eq!(r.devices.len(), 1);
            assert_eq!(r.skipped[0].device_id, 1);
            assert!(r.coverage.iter().flatten().all(|&c| c == 1));
        }
        let bad = SessionConfig { lr: 0.0, ..cfg };
        assert!(matches!(bad.validate(), Err(FedError::Config(_))));
    }
}
