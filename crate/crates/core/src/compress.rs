//! Magnitude pruning, 1-D k-means weight clustering and precision reduction,
//! plus the mapping of compressed-model gradients back onto the global model.
//!
//! Biases are never pruned or clustered; they follow float quantization but
//! stay in the compute format under affine quantization.

use alloc::vec;
use alloc::vec::Vec;

use bitvec::prelude::{BitVec, Lsb0};

use crate::kernel::{with_kernel, Exec, Kernel};
use crate::mlp::{GradientSet, Matrix, MlpError, MlpModel};
use crate::numfmt::{self, AffineFormat, ScalarFormat};
use crate::rng::SeededRng;

/// Retained-weight bitset of one weight matrix, row-major, `true` = kept.
pub type Mask = BitVec<u8, Lsb0>;

const LLOYD_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompressError {
    #[error("{field} is out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("weight range is degenerate (max = min)")]
    DegenerateRange,
    #[error("compressed state does not match: {0}")]
    StateMismatch(&'static str),
    #[error(transparent)]
    Mlp(#[from] MlpError),
}

/// Per-device compression recipe, applied as prune, then cluster, then
/// quantize.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CompressionPlan {
    pub prune_ratio: f64,
    pub target_format: Option<ScalarFormat>,
    pub cluster_k: Option<usize>,
}

impl CompressionPlan {
    pub fn none() -> Self {
        CompressionPlan::default()
    }

    pub fn prune(ratio: f64) -> Self {
        CompressionPlan { prune_ratio: ratio, ..Self::default() }
    }

    pub fn quantize(to: ScalarFormat) -> Self {
        CompressionPlan { target_format: Some(to), ..Self::default() }
    }

    pub fn cluster(k: usize) -> Self {
        CompressionPlan { cluster_k: Some(k), ..Self::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.prune_ratio == 0.0 && self.target_format.is_none() && self.cluster_k.is_none()
    }

    pub fn validate(&self) -> Result<(), CompressError> {
        check_ratio(self.prune_ratio)?;
        if self.cluster_k == Some(0) {
            return Err(CompressError::OutOfRange { field: "cluster_k", value: 0.0 });
        }
        if let Some(ScalarFormat::Affine(a)) = self.target_format {
            check_affine_bits(a.bit_width())?;
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<(), CompressError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CompressError::OutOfRange { field: "prune_ratio", value: ratio });
    }
    Ok(())
}

fn check_affine_bits(bits: u32) -> Result<(), CompressError> {
    if !(2..=16).contains(&bits) {
        return Err(CompressError::OutOfRange { field: "bits", value: bits as f64 });
    }
    Ok(())
}

/// Shared values of one clustered weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// Centroid values, ascending.
    pub centroids: Vec<f64>,
    /// Cluster of each retained weight, in row-major order of the retained
    /// positions.
    pub indices: Vec<u32>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Cluster of every position (`None` for masked positions).
    pub fn assignment(&self, mask: &Mask) -> Vec<Option<u32>> {
        let mut it = self.indices.iter();
        mask.iter().map(|kept| if *kept { it.next().copied() } else { None }).collect()
    }
}

/// Scale and zero point chosen for one affine-quantized weight matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: u32,
}

impl AffineParams {
    pub fn format(&self) -> ScalarFormat {
        ScalarFormat::Affine(AffineFormat::new(self.bits, self.scale, self.zero_point).expect("validated on creation"))
    }
}

/// Everything needed to interpret a compressed local model and map its
/// gradients back to the global model.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedState {
    pub masks: Vec<Mask>,
    pub codebooks: Vec<Option<Codebook>>,
    pub affine: Vec<Option<AffineParams>>,
    pub plan: CompressionPlan,
    pub origin_format: ScalarFormat,
}

impl CompressedState {
    /// State of an uncompressed copy of `model`.
    pub fn identity(model: &MlpModel) -> Self {
        let layers = model.layers();
        CompressedState {
            masks: model.weights().iter().map(|w| full_mask(w.len())).collect(),
            codebooks: vec![None; layers],
            affine: vec![None; layers],
            plan: CompressionPlan::none(),
            origin_format: model.format(),
        }
    }

    pub fn retained(&self) -> usize {
        self.masks.iter().map(|m| m.count_ones()).sum()
    }

    fn check_shape(&self, grads: &GradientSet) -> Result<(), CompressError> {
        if grads.weights.len() != self.masks.len()
            || grads.weights.iter().zip(&self.masks).any(|(g, m)| g.len() != m.len())
        {
            return Err(CompressError::StateMismatch("gradient shapes disagree with the masks"));
        }
        Ok(())
    }
}

pub fn full_mask(len: usize) -> Mask {
    BitVec::repeat(true, len)
}

/// Number of weights `prune` removes from a matrix of `count` weights.
pub fn pruned_count(ratio: f64, count: usize) -> usize {
    // the small guard keeps exact products like 0.3 * 10 from flooring to 2
    (libm::floor(ratio * count as f64 + 1e-9) as usize).min(count)
}

/// Zeroes and masks out the `floor(ratio * count)` smallest-magnitude weights
/// of every weight matrix; ties go to the lower flat index.
pub fn prune(model: &MlpModel, ratio: f64) -> Result<(MlpModel, Vec<Mask>), CompressError> {
    check_ratio(ratio)?;
    let mut out = model.clone();
    let mut masks = Vec::with_capacity(model.layers());
    for w in out.weights_mut() {
        let values = w.to_f64();
        let drop = pruned_count(ratio, values.len());
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
        let mut mask = full_mask(values.len());
        let zero = numfmt::encode_total(0.0, w.format());
        for &i in &order[..drop] {
            mask.set(i, false);
            w.bits_mut()[i] = zero;
        }
        masks.push(mask);
    }
    Ok((out, masks))
}

fn sq(x: f64) -> f64 {
    x * x
}

fn nearest(centroids: &[f64], v: f64) -> usize {
    let mut best = 0;
    for c in 1..centroids.len() {
        if sq(v - centroids[c]) < sq(v - centroids[best]) {
            best = c;
        }
    }
    best
}

/// 1-D k-means: k-means++ seeding from `rng`, then Lloyd iterations until
/// the assignment stops changing or the iteration cap is hit. Returns the
/// centroids ascending and each value's cluster.
pub fn kmeans_1d(values: &[f64], k: usize, rng: &mut SeededRng) -> (Vec<f64>, Vec<u32>) {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let centroids = if distinct.len() <= k {
        distinct
    } else {
        let mut c = Vec::with_capacity(k);
        c.push(values[rng.below(values.len() as u64) as usize]);
        while c.len() < k {
            let d2: Vec<f64> = values.iter().map(|&v| sq(v - c[nearest(&c, v)])).collect();
            let total: f64 = d2.iter().sum();
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = values.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            c.push(values[pick]);
        }
        let mut assign: Vec<usize> = values.iter().map(|&v| nearest(&c, v)).collect();
        for _ in 0..LLOYD_MAX_ITERS {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for (&v, &a) in values.iter().zip(&assign) {
                sums[a] += v;
                counts[a] += 1;
            }
            for j in 0..k {
                if counts[j] > 0 {
                    c[j] = sums[j] / counts[j] as f64;
                }
            }
            let next: Vec<usize> = values.iter().map(|&v| nearest(&c, v)).collect();
            if next == assign {
                break;
            }
            assign = next;
        }
        c
    };
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| centroids[i]).collect();
    let indices = values.iter().map(|&v| nearest(&sorted, v) as u32).collect();
    (sorted, indices)
}

/// Replaces every retained weight by its cluster centroid, per weight matrix.
/// Without masks every weight counts as retained.
pub fn cluster(
    model: &MlpModel,
    k: usize,
    seed: u64,
    masks: Option<&[Mask]>,
) -> Result<(MlpModel, Vec<Codebook>), CompressError> {
    if k == 0 {
        return Err(CompressError::OutOfRange { field: "cluster_k", value: 0.0 });
    }
    let mut rng = SeededRng::new(seed);
    let mut out = model.clone();
    let mut books = Vec::with_capacity(model.layers());
    for (l, w) in out.weights_mut().iter_mut().enumerate() {
        let mask = masks.map_or_else(|| full_mask(w.len()), |m| m[l].clone());
        let retained: Vec<usize> = mask.iter_ones().collect();
        let values: Vec<f64> = retained.iter().map(|&i| w.value(i)).collect();
        if values.is_empty() {
            books.push(Codebook { centroids: Vec::new(), indices: Vec::new() });
            continue;
        }
        let (mut centroids, indices) = kmeans_1d(&values, k, &mut rng);
        let fmt = w.format();
        for c in centroids.iter_mut() {
            *c = numfmt::decode_bits(numfmt::encode_total(*c, fmt), fmt);
        }
        for (&pos, &idx) in retained.iter().zip(&indices) {
            w.bits_mut()[pos] = numfmt::encode_total(centroids[idx as usize], fmt);
        }
        books.push(Codebook { centroids, indices });
    }
    Ok((out, books))
}

/// Converts every parameter to `to`; training then runs in `to`.
pub fn quantize_format(model: &MlpModel, to: ScalarFormat) -> MlpModel {
    let weights = model.weights().iter().map(|m| m.convert(to)).collect();
    let biases = model.biases().iter().map(|m| m.convert(to)).collect();
    MlpModel::from_parts(model.dims().to_vec(), weights, biases, to).expect("shapes unchanged")
}

/// Scale and zero point covering `[min(lo, 0), max(hi, 0)]` with `bits`-bit
/// codes. Including zero keeps pruned weights exact and bounds the round-trip
/// error by `scale / 2` for one-sided ranges.
pub fn affine_params(lo: f64, hi: f64, bits: u32) -> Result<AffineParams, CompressError> {
    check_affine_bits(bits)?;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(CompressError::OutOfRange { field: "range", value: hi - lo });
    }
    if lo == hi {
        return Err(CompressError::DegenerateRange);
    }
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let max_code = (1u64 << bits) - 1;
    let scale = (hi - lo) / max_code as f64;
    let zp = libm::round(-lo / scale).clamp(0.0, max_code as f64) as u32;
    Ok(AffineParams { bits, scale, zero_point: zp })
}

/// Parameters used when a matrix's retained weights all equal `c`: the code
/// grid is chosen so `c` and 0 are both exact.
fn degenerate_params(c: f64, bits: u32) -> AffineParams {
    if c > 0.0 {
        AffineParams { bits, scale: c, zero_point: 0 }
    } else if c < 0.0 {
        AffineParams { bits, scale: -c, zero_point: 1 }
    } else {
        AffineParams { bits, scale: 1.0, zero_point: 0 }
    }
}

/// Stores every weight matrix as `bits`-bit affine codes with per-matrix
/// parameters fitted to its retained weights. Arithmetic stays in the
/// model's format.
pub fn quantize_affine(
    model: &MlpModel,
    bits: u32,
    masks: Option<&[Mask]>,
) -> Result<(MlpModel, Vec<AffineParams>), CompressError> {
    check_affine_bits(bits)?;
    let mut weights = Vec::with_capacity(model.layers());
    let mut params = Vec::with_capacity(model.layers());
    for (l, w) in model.weights().iter().enumerate() {
        let values = w.to_f64();
        let retained: Vec<f64> = match masks {
            Some(m) => m[l].iter_ones().map(|i| values[i]).collect(),
            None => values.clone(),
        };
        let lo = retained.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = retained.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = match affine_params(lo, hi, bits) {
            Ok(p) => p,
            Err(CompressError::DegenerateRange) => degenerate_params(lo, bits),
            Err(_) if retained.is_empty() => degenerate_params(0.0, bits),
            Err(e) => return Err(e),
        };
        let fmt = p.format();
        weights.push(Matrix::from_f64(w.rows(), w.cols(), &values, fmt)?);
        params.push(p);
    }
    let quantized = MlpModel::from_parts(model.dims().to_vec(), weights, model.biases().to_vec(), model.format())?;
    Ok((quantized, params))
}

/// Derives a device's local model from the global one.
pub fn apply_plan(global: &MlpModel, plan: &CompressionPlan, seed: u64) -> Result<(MlpModel, CompressedState), CompressError> {
    plan.validate()?;
    let mut state = CompressedState::identity(global);
    state.plan = *plan;
    if plan.is_empty() {
        return Ok((global.clone(), state));
    }
    let (mut local, masks) = prune(global, plan.prune_ratio)?;
    state.masks = masks;
    if let Some(k) = plan.cluster_k {
        let (clustered, books) = cluster(&local, k, seed, Some(&state.masks))?;
        local = clustered;
        state.codebooks = books.into_iter().map(Some).collect();
    }
    match plan.target_format {
        None => {}
        Some(ScalarFormat::Affine(a)) => {
            let (q, params) = quantize_affine(&local, a.bit_width(), Some(&state.masks))?;
            local = q;
            state.affine = params.into_iter().map(Some).collect();
        }
        Some(to) => local = quantize_format(&local, to),
    }
    if plan.target_format.is_some() {
        // centroids take the values the quantized weights actually hold
        for (l, book) in state.codebooks.iter_mut().enumerate() {
            if let Some(book) = book {
                let w = &local.weights()[l];
                let firsts = first_members(book, &state.masks[l]);
                for (c, pos) in book.centroids.iter_mut().zip(firsts) {
                    if let Some(p) = pos {
                        *c = w.value(p);
                    }
                }
            }
        }
    }
    Ok((local, state))
}

// Position of the first member of each cluster.
fn first_members(book: &Codebook, mask: &Mask) -> Vec<Option<usize>> {
    let mut first = vec![None; book.k()];
    for (pos, a) in book.assignment(mask).into_iter().enumerate() {
        if let Some(a) = a {
            first[a as usize].get_or_insert(pos);
        }
    }
    first
}

/// The single gradient a cluster's members share: their common value when
/// they already agree bit for bit, otherwise their mean (ascending sum, then
/// one division, in the gradient's format).
fn shared_gradient(bits: &[u64], fmt: ScalarFormat) -> u64 {
    if bits.iter().all(|&b| b == bits[0]) {
        return bits[0];
    }
    with_kernel!(fmt, Exec::Auto, |k| {
        let mut acc = k.load(bits[0]);
        for &b in &bits[1..] {
            acc = k.add(acc, k.load(b));
        }
        k.store(k.div(acc, k.encode(bits.len() as f64)))
    })
}

fn project_matrix(g: &mut Matrix, mask: &Mask, book: Option<&Codebook>) {
    let zero = numfmt::encode_total(0.0, g.format());
    for (i, kept) in mask.iter().enumerate() {
        if !*kept {
            g.bits_mut()[i] = zero;
        }
    }
    if let Some(book) = book {
        let assignment = book.assignment(mask);
        for c in 0..book.k() as u32 {
            let members: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == Some(c)).collect();
            if members.is_empty() {
                continue;
            }
            let bits: Vec<u64> = members.iter().map(|&i| g.bits()[i]).collect();
            let shared = shared_gradient(&bits, g.format());
            for &i in &members {
                g.bits_mut()[i] = shared;
            }
        }
    }
}

/// Restricts gradients to what the compressed model can learn: masked
/// positions get 0 and clustered members share their cluster's gradient.
pub fn project(grads: &GradientSet, state: &CompressedState) -> Result<GradientSet, CompressError> {
    state.check_shape(grads)?;
    let mut out = grads.clone();
    for (l, g) in out.weights.iter_mut().enumerate() {
        project_matrix(g, &state.masks[l], state.codebooks[l].as_ref());
    }
    Ok(out)
}

/// Maps compressed-model gradients onto the global model: converts them to
/// the origin format, shares cluster gradients and zeroes masked positions.
/// Also returns, per weight matrix, which positions the device covers.
pub fn expand(grads: &GradientSet, state: &CompressedState) -> Result<(GradientSet, Vec<Mask>), CompressError> {
    let projected = project(grads, state)?;
    Ok((projected.convert(state.origin_format), state.masks.clone()))
}
