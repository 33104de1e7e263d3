//! Multi-layer perceptron training with every scalar operation executed in
//! the model's format.
//!
//! Layers compute `z = a W + b`, `a' = sigmoid(z)` with `W` stored
//! `fan_in x fan_out`. The loss is mean binary cross-entropy; at the output
//! the sigmoid/cross-entropy pair gives the delta `y_hat - y`. All sums run
//! sequentially in ascending index order, so results are reproducible bit
//! for bit regardless of thread count.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernel::{with_kernel, Exec, Kernel};
use crate::numfmt::{self, ArithOp, EncodedScalar, ScalarFormat};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MlpError {
    #[error("layer dimensions out of range: {0}")]
    OutOfRange(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// Dense row-major matrix of encoded scalars sharing one format.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<u64>,
    format: ScalarFormat,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, format: ScalarFormat) -> Self {
        let zero = numfmt::encode_total(0.0, format);
        Matrix { rows, cols, data: vec![zero; rows * cols], format }
    }

    pub fn from_bits(rows: usize, cols: usize, data: Vec<u64>, format: ScalarFormat) -> Result<Self, MlpError> {
        if data.len() != rows * cols {
            return Err(MlpError::ShapeMismatch("data length differs from rows x cols"));
        }
        Ok(Matrix { rows, cols, data, format })
    }

    /// Rounds each value into `format`. NaN into an affine format becomes 0.
    pub fn from_f64(rows: usize, cols: usize, values: &[f64], format: ScalarFormat) -> Result<Self, MlpError> {
        if values.len() != rows * cols {
            return Err(MlpError::ShapeMismatch("value count differs from rows x cols"));
        }
        let data = values.iter().map(|&v| numfmt::encode_total(v, format)).collect();
        Ok(Matrix { rows, cols, data, format })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn format(&self) -> ScalarFormat {
        self.format
    }

    pub fn bits(&self) -> &[u64] {
        &self.data
    }

    pub fn bits_mut(&mut self) -> &mut [u64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> EncodedScalar {
        EncodedScalar { bits: self.data[row * self.cols + col], format: self.format }
    }

    pub fn value(&self, index: usize) -> f64 {
        numfmt::decode_bits(self.data[index], self.format)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| numfmt::decode_bits(b, self.format)).collect()
    }

    pub fn convert(&self, to: ScalarFormat) -> Matrix {
        let data = self.data.iter().map(|&b| numfmt::convert_bits(b, self.format, to)).collect();
        Matrix { rows: self.rows, cols: self.cols, data, format: to }
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &r in indices {
            data.extend_from_slice(&self.data[r * self.cols..(r + 1) * self.cols]);
        }
        Matrix { rows: indices.len(), cols: self.cols, data, format: self.format }
    }

    fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
}

/// Architecture with `hidden` layers of `width` neurons between a
/// `features`-wide input and a single sigmoid output.
pub fn layer_dims(features: usize, hidden: usize, width: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden + 2);
    dims.push(features);
    dims.extend(core::iter::repeat(width).take(hidden));
    dims.push(1);
    dims
}

/// Default architecture: 5 inputs, five hidden layers of 10, one output.
pub fn default_dims() -> Vec<usize> {
    layer_dims(5, 5, 10)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
    activation: Activation,
    format: ScalarFormat,
}

fn check_dims(dims: &[usize]) -> Result<(), MlpError> {
    if dims.len() < 2 {
        return Err(MlpError::OutOfRange("need at least an input and an output layer"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(MlpError::OutOfRange("zero-width layer"));
    }
    Ok(())
}

/// Glorot-uniform weights `U(-r, r)`, `r = sqrt(6 / (fan_in + fan_out))`,
/// drawn layer by layer in row-major order; zero biases.
pub fn init_model(dims: &[usize], format: ScalarFormat, seed: u64) -> Result<MlpModel, MlpError> {
    check_dims(dims)?;
    let mut rng = SeededRng::new(seed);
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let r = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let values: Vec<f64> = (0..fan_in * fan_out).map(|_| (2.0 * rng.uniform() - 1.0) * r).collect();
        weights.push(Matrix::from_f64(fan_in, fan_out, &values, format)?);
        biases.push(Matrix::zeros(1, fan_out, format));
    }
    Ok(MlpModel { dims: dims.to_vec(), weights, biases, activation: Activation::Sigmoid, format })
}

impl MlpModel {
    /// Builds a model from explicit parameter matrices. Weight matrices may
    /// carry their own storage format (e.g. affine codes); arithmetic runs
    /// in `format`.
    pub fn from_parts(
        dims: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Matrix>,
        format: ScalarFormat,
    ) -> Result<Self, MlpError> {
        check_dims(&dims)?;
        if weights.len() != dims.len() - 1 || biases.len() != dims.len() - 1 {
            return Err(MlpError::ShapeMismatch("one weight matrix and bias per layer transition"));
        }
        for (l, pair) in dims.windows(2).enumerate() {
            if weights[l].rows != pair[0] || weights[l].cols != pair[1] {
                return Err(MlpError::ShapeMismatch("weight shape disagrees with layer dims"));
            }
            if biases[l].rows != 1 || biases[l].cols != pair[1] {
                return Err(MlpError::ShapeMismatch("bias length disagrees with layer width"));
            }
        }
        Ok(MlpModel { dims, weights, biases, activation: Activation::Sigmoid, format })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Matrix] {
        &mut self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Format all training arithmetic runs in.
    pub fn format(&self) -> ScalarFormat {
        self.format
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.biases.iter().map(Matrix::len).sum::<usize>()
    }
}

/// Per-parameter gradients, shape-congruent with a model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    pub sample_count: usize,
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel, format: ScalarFormat) -> Self {
        GradientSet {
            weights: model.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols, format)).collect(),
            biases: model.biases.iter().map(|b| Matrix::zeros(1, b.cols, format)).collect(),
            sample_count: 0,
        }
    }

    pub fn format(&self) -> ScalarFormat {
        self.weights.first().map(Matrix::format).unwrap_or(ScalarFormat::F64)
    }

    pub fn convert(&self, to: ScalarFormat) -> GradientSet {
        GradientSet {
            weights: self.weights.iter().map(|m| m.convert(to)).collect(),
            biases: self.biases.iter().map(|m| m.convert(to)).collect(),
            sample_count: self.sample_count,
        }
    }

    pub fn is_congruent(&self, model: &MlpModel) -> bool {
        self.weights.len() == model.weights.len()
            && self.biases.len() == model.biases.len()
            && self.weights.iter().zip(&model.weights).all(|(g, w)| g.same_shape(w))
            && self.biases.iter().zip(&model.biases).all(|(g, b)| g.same_shape(b))
    }
}

/// Binary classification samples: `n x d` features plus `n x 1` labels in
/// {0, 1}, both stored in the dataset's format.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Matrix,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Matrix) -> Result<Self, MlpError> {
        if labels.rows != features.rows || labels.cols != 1 {
            return Err(MlpError::ShapeMismatch("labels must be n x 1 for n feature rows"));
        }
        if labels.to_f64().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(MlpError::InvalidArgument("labels must be 0 or 1"));
        }
        Ok(Dataset { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.features.rows
    }

    pub fn d(&self) -> usize {
        self.features.cols
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    pub fn format(&self) -> ScalarFormat {
        self.features.format
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset { features: self.features.select_rows(indices), labels: self.labels.select_rows(indices) }
    }

    pub fn convert(&self, to: ScalarFormat) -> Dataset {
        Dataset { features: self.features.convert(to), labels: self.labels.convert(to) }
    }
}

/// Per-layer pre-activations `z` and activations `a` (with `a[0]` the input).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub pre_activations: Vec<Matrix>,
    pub activations: Vec<Matrix>,
}

impl ActivationTrace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("trace has at least the input layer")
    }
}

// ---------------------------------------------------------------------------
// Backend-generic kernels
// ---------------------------------------------------------------------------

struct Params<W> {
    dims: Vec<usize>,
    weights: Vec<Vec<W>>,
    biases: Vec<Vec<W>>,
}

struct Trace<W> {
    zs: Vec<Vec<W>>,
    acts: Vec<Vec<W>>,
}

fn load_matrix<K: Kernel>(k: K, m: &Matrix) -> Vec<K::W> {
    m.data.iter().map(|&b| k.load_from(b, m.format)).collect()
}

fn store_matrix<K: Kernel>(k: K, rows: usize, cols: usize, data: &[K::W]) -> Matrix {
    Matrix { rows, cols, data: data.iter().map(|&w| k.store(w)).collect(), format: k.format() }
}

fn load_params<K: Kernel>(k: K, model: &MlpModel) -> Params<K::W> {
    Params {
        dims: model.dims.clone(),
        weights: model.weights.iter().map(|m| load_matrix(k, m)).collect(),
        biases: model.biases.iter().map(|m| load_matrix(k, m)).collect(),
    }
}

fn forward_k<K: Kernel>(k: K, p: &Params<K::W>, input: Vec<K::W>, n: usize) -> Trace<K::W> {
    let layers = p.weights.len();
    let mut zs = Vec::with_capacity(layers);
    let mut acts = Vec::with_capacity(layers + 1);
    acts.push(input);
    for l in 0..layers {
        let (fin, fout) = (p.dims[l], p.dims[l + 1]);
        let a = &acts[l];
        let w = &p.weights[l];
        let b = &p.biases[l];
        let mut z = vec![k.zero(); n * fout];
        let mut out = vec![k.zero(); n * fout];
        for i in 0..n {
            let a_row = &a[i * fin..(i + 1) * fin];
            let z_row = &mut z[i * fout..(i + 1) * fout];
            for (kk, &av) in a_row.iter().enumerate() {
                let w_row = &w[kk * fout..(kk + 1) * fout];
                for (zj, &wj) in z_row.iter_mut().zip(w_row) {
                    *zj = k.add(*zj, k.mul(av, wj));
                }
            }
            let o_row = &mut out[i * fout..(i + 1) * fout];
            for j in 0..fout {
                z_row[j] = k.add(z_row[j], b[j]);
                o_row[j] = k.sigmoid(z_row[j]);
            }
        }
        zs.push(z);
        acts.push(out);
    }
    Trace { zs, acts }
}

/// Mean binary cross-entropy with both log arguments clamped below at
/// `eps = encode(1e-7)`.
fn loss_k<K: Kernel>(k: K, y_hat: &[K::W], labels: &[K::W]) -> K::W {
    let one = k.encode(1.0);
    let eps = k.encode(1e-7);
    let mut sum = k.zero();
    for (&p, &y) in y_hat.iter().zip(labels) {
        let term = if k.decode(y) == 1.0 { k.log(k.max(p, eps)) } else { k.log(k.max(k.sub(one, p), eps)) };
        sum = k.add(sum, term);
    }
    let mean = k.div(sum, k.encode(y_hat.len() as f64));
    k.sub(k.zero(), mean)
}

fn backward_k<K: Kernel>(
    k: K,
    p: &Params<K::W>,
    trace: &Trace<K::W>,
    labels: &[K::W],
    n: usize,
) -> (Vec<Vec<K::W>>, Vec<Vec<K::W>>) {
    let layers = p.weights.len();
    let n_enc = k.encode(n as f64);
    let one = k.encode(1.0);
    let mut grad_w: Vec<Vec<K::W>> = Vec::with_capacity(layers);
    let mut grad_b: Vec<Vec<K::W>> = Vec::with_capacity(layers);
    let out = &trace.acts[layers];
    let mut delta: Vec<K::W> = out.iter().zip(labels).map(|(&yh, &y)| k.sub(yh, y)).collect();
    for l in (0..layers).rev() {
        let (fin, fout) = (p.dims[l], p.dims[l + 1]);
        let a_prev = &trace.acts[l];
        let mut gw = vec![k.zero(); fin * fout];
        let mut gb = vec![k.zero(); fout];
        for i in 0..n {
            let a_row = &a_prev[i * fin..(i + 1) * fin];
            let d_row = &delta[i * fout..(i + 1) * fout];
            for (kk, &av) in a_row.iter().enumerate() {
                let g_row = &mut gw[kk * fout..(kk + 1) * fout];
                for (g, &d) in g_row.iter_mut().zip(d_row) {
                    *g = k.add(*g, k.mul(av, d));
                }
            }
            for (g, &d) in gb.iter_mut().zip(d_row) {
                *g = k.add(*g, d);
            }
        }
        for g in gw.iter_mut().chain(gb.iter_mut()) {
            *g = k.div(*g, n_enc);
        }
        if l > 0 {
            // delta_prev = (delta W^T) * a (1 - a), summing over j ascending
            let w = &p.weights[l];
            let mut w_t = vec![k.zero(); fin * fout];
            for kk in 0..fin {
                for j in 0..fout {
                    w_t[j * fin + kk] = w[kk * fout + j];
                }
            }
            let mut next = vec![k.zero(); n * fin];
            for i in 0..n {
                let d_row = &delta[i * fout..(i + 1) * fout];
                let acc = &mut next[i * fin..(i + 1) * fin];
                for (j, &d) in d_row.iter().enumerate() {
                    let wt_row = &w_t[j * fin..(j + 1) * fin];
                    for (s, &wv) in acc.iter_mut().zip(wt_row) {
                        *s = k.add(*s, k.mul(d, wv));
                    }
                }
                let a_row = &a_prev[i * fin..(i + 1) * fin];
                for (s, &a) in acc.iter_mut().zip(a_row) {
                    let deriv = k.mul(a, k.sub(one, a));
                    *s = k.mul(*s, deriv);
                }
            }
            delta = next;
        }
        grad_w.push(gw);
        grad_b.push(gb);
    }
    grad_w.reverse();
    grad_b.reverse();
    (grad_w, grad_b)
}

fn check_input(model: &MlpModel, batch: &Matrix) -> Result<(), MlpError> {
    if batch.cols != model.dims[0] {
        return Err(MlpError::ShapeMismatch("batch columns differ from the input width"));
    }
    Ok(())
}

fn store_grads<K: Kernel>(k: K, model: &MlpModel, gw: &[Vec<K::W>], gb: &[Vec<K::W>], n: usize) -> GradientSet {
    GradientSet {
        weights: model.weights.iter().zip(gw).map(|(m, g)| store_matrix(k, m.rows, m.cols, g)).collect(),
        biases: model.biases.iter().zip(gb).map(|(m, g)| store_matrix(k, 1, m.cols, g)).collect(),
        sample_count: n,
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

pub fn forward(model: &MlpModel, batch: &Matrix) -> Result<ActivationTrace, MlpError> {
    forward_with(model, batch, Exec::Auto)
}

pub fn forward_with(model: &MlpModel, batch: &Matrix, exec: Exec) -> Result<ActivationTrace, MlpError> {
    check_input(model, batch)?;
    let n = batch.rows;
    Ok(with_kernel!(model.format, exec, |k| {
        let p = load_params(k, model);
        let t = forward_k(k, &p, load_matrix(k, batch), n);
        let dims = &model.dims;
        ActivationTrace {
            pre_activations: t.zs.iter().enumerate().map(|(l, z)| store_matrix(k, n, dims[l + 1], z)).collect(),
            activations: t.acts.iter().enumerate().map(|(l, a)| store_matrix(k, n, dims[l], a)).collect(),
        }
    }))
}

pub fn backward(model: &MlpModel, trace: &ActivationTrace, labels: &Matrix) -> Result<GradientSet, MlpError> {
    backward_with(model, trace, labels, Exec::Auto)
}

pub fn backward_with(
    model: &MlpModel,
    trace: &ActivationTrace,
    labels: &Matrix,
    exec: Exec,
) -> Result<GradientSet, MlpError> {
    let layers = model.layers();
    if trace.activations.len() != layers + 1 || trace.pre_activations.len() != layers {
        return Err(MlpError::ShapeMismatch("trace depth differs from the model"));
    }
    let n = trace.activations[0].rows;
    for (l, a) in trace.activations.iter().enumerate() {
        if a.rows != n || a.cols != model.dims[l] {
            return Err(MlpError::ShapeMismatch("trace activation shape differs from the model"));
        }
    }
    if model.dims[layers] != 1 || labels.rows != n || labels.cols != 1 {
        return Err(MlpError::ShapeMismatch("labels must be n x 1 against a single output"));
    }
    Ok(with_kernel!(model.format, exec, |k| {
        let p = load_params(k, model);
        let t = Trace {
            zs: trace.pre_activations.iter().map(|m| load_matrix(k, m)).collect(),
            acts: trace.activations.iter().map(|m| load_matrix(k, m)).collect(),
        };
        let (gw, gb) = backward_k(k, &p, &t, &load_matrix(k, labels), n);
        store_grads(k, model, &gw, &gb, n)
    }))
}

/// Full-batch gradients and the pre-update loss, in the model's format.
pub fn gradients(model: &MlpModel, data: &Dataset) -> Result<(GradientSet, f64), MlpError> {
    gradients_with(model, data, Exec::Auto)
}

pub fn gradients_with(model: &MlpModel, data: &Dataset, exec: Exec) -> Result<(GradientSet, f64), MlpError> {
    if data.is_empty() {
        return Err(MlpError::EmptyDataset);
    }
    check_input(model, &data.features)?;
    if model.dims[model.layers()] != 1 {
        return Err(MlpError::ShapeMismatch("binary classification needs a single output"));
    }
    let n = data.n();
    Ok(with_kernel!(model.format, exec, |k| {
        let p = load_params(k, model);
        let labels = load_matrix(k, &data.labels);
        let t = forward_k(k, &p, load_matrix(k, &data.features), n);
        let loss = k.decode(loss_k(k, &t.acts[model.layers()], &labels));
        let (gw, gb) = backward_k(k, &p, &t, &labels, n);
        (store_grads(k, model, &gw, &gb, n), loss)
    }))
}

/// Mean cross-entropy of `model` on `data`.
pub fn loss(model: &MlpModel, data: &Dataset) -> Result<f64, MlpError> {
    if data.is_empty() {
        return Err(MlpError::EmptyDataset);
    }
    check_input(model, &data.features)?;
    let n = data.n();
    Ok(with_kernel!(model.format, Exec::Auto, |k| {
        let p = load_params(k, model);
        let t = forward_k(k, &p, load_matrix(k, &data.features), n);
        k.decode(loss_k(k, &t.acts[model.layers()], &load_matrix(k, &data.labels)))
    }))
}

/// `w <- w - lr * g`. The step `lr * g` is rounded into the model format and
/// the difference into each parameter matrix's own storage format.
pub fn apply_update(model: &MlpModel, grads: &GradientSet, lr: f64) -> Result<MlpModel, MlpError> {
    apply_update_with(model, grads, lr, Exec::Auto)
}

pub fn apply_update_with(model: &MlpModel, grads: &GradientSet, lr: f64, exec: Exec) -> Result<MlpModel, MlpError> {
    if !grads.is_congruent(model) {
        return Err(MlpError::ShapeMismatch("gradients are not congruent with the model"));
    }
    let mut out = model.clone();
    let fmt = model.format;
    let pairs = out.weights.iter_mut().zip(&grads.weights).chain(out.biases.iter_mut().zip(&grads.biases));
    for (param, grad) in pairs {
        if param.format == fmt && grad.format == fmt {
            with_kernel!(fmt, exec, |k| {
                let lr_w = k.encode(lr);
                for (p, &g) in param.data.iter_mut().zip(&grad.data) {
                    let step = k.mul(lr_w, k.load(g));
                    *p = k.store(k.sub(k.load(*p), step));
                }
            });
        } else {
            let lr_e = numfmt::encode_total(lr, fmt);
            for (p, &g) in param.data.iter_mut().zip(&grad.data) {
                let step = numfmt::arith_bits(ArithOp::Mul, lr_e, fmt, g, grad.format, fmt);
                *p = numfmt::arith_bits(ArithOp::Sub, *p, param.format, step, fmt, param.format);
            }
        }
    }
    Ok(out)
}

/// One full-batch gradient-descent step; returns the updated model and the
/// loss measured before the update.
pub fn train_epoch(model: &MlpModel, train: &Dataset, lr: f64) -> Result<(MlpModel, f64), MlpError> {
    train_epoch_with(model, train, lr, Exec::Auto)
}

pub fn train_epoch_with(model: &MlpModel, train: &Dataset, lr: f64, exec: Exec) -> Result<(MlpModel, f64), MlpError> {
    let (grads, loss) = gradients_with(model, train, exec)?;
    Ok((apply_update_with(model, &grads, lr, exec)?, loss))
}

/// Fraction of samples whose thresholded output matches the label; an
/// output of exactly 0.5 counts as class 1.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<f64, MlpError> {
    if data.is_empty() {
        return Err(MlpError::EmptyDataset);
    }
    check_input(model, &data.features)?;
    let n = data.n();
    let correct = with_kernel!(model.format, Exec::Auto, |k| {
        let p = load_params(k, model);
        let t = forward_k(k, &p, load_matrix(k, &data.features), n);
        let out = &t.acts[model.layers()];
        let width = model.dims[model.layers()];
        (0..n)
            .filter(|&i| {
                let predicted = if k.decode(out[i * width]) >= 0.5 { 1.0 } else { 0.0 };
                predicted == data.labels.value(i)
            })
            .count()
    });
    Ok(correct as f64 / n as f64)
}

/// Largest relative disagreement between analytic gradients and central
/// differences `(L(w + eps) - L(w - eps)) / 2eps`, over every parameter.
///
/// Subtracting two rounded losses loses most digits when a gradient is tiny,
/// so the difference is instead carried through the network directly: the
/// perturbation enters one pre-activation, sigmoid differences use
/// `s(b + d) - s(b) = -s(b + d) s(-b) expm1(-d)`, and the loss difference uses
/// `log1p`. The clamp of the training loss is not applied here.
pub fn grad_check(model: &MlpModel, batch: &Dataset, eps: f64) -> Result<f64, MlpError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(MlpError::InvalidArgument("finite-difference step must be positive"));
    }
    if model.format != ScalarFormat::F64
        || model.weights.iter().chain(&model.biases).any(|m| m.format != ScalarFormat::F64)
    {
        return Err(MlpError::InvalidArgument("gradient checking needs an f64 model"));
    }
    let (grads, _) = gradients(model, batch)?;
    let n = batch.n();
    let dims = &model.dims;
    let weights: Vec<Vec<f64>> = model.weights.iter().map(Matrix::to_f64).collect();
    let biases: Vec<Vec<f64>> = model.biases.iter().map(Matrix::to_f64).collect();
    let labels = batch.labels.to_f64();
    // base pass in plain f64
    let mut zs: Vec<Vec<f64>> = Vec::new();
    let mut acts: Vec<Vec<f64>> = vec![batch.features.to_f64()];
    for l in 0..model.layers() {
        let (fin, fout) = (dims[l], dims[l + 1]);
        let a = &acts[l];
        let mut z = vec![0.0; n * fout];
        for i in 0..n {
            for j in 0..fout {
                let s: f64 = (0..fin).map(|k| a[i * fin + k] * weights[l][k * fout + j]).sum();
                z[i * fout + j] = s + biases[l][j];
            }
        }
        acts.push(z.iter().map(|&v| numfmt::sigmoid_f64(v)).collect());
        zs.push(z);
    }
    // L(w + h) - L(w) where `h` perturbs column `j` of layer `l` by `dz(i)`
    let loss_shift = |l: usize, j: usize, dz: &dyn Fn(usize) -> f64| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let mut delta_z = vec![0.0; dims[l + 1]];
            delta_z[j] = dz(i);
            let mut layer = l;
            loop {
                let width = dims[layer + 1];
                let z = &zs[layer][i * width..(i + 1) * width];
                let delta_a: Vec<f64> = z
                    .iter()
                    .zip(&delta_z)
                    .map(|(&b, &d)| -numfmt::sigmoid_f64(b + d) * numfmt::sigmoid_f64(-b) * libm::expm1(-d))
                    .collect();
                layer += 1;
                if layer == model.layers() {
                    let p = acts[layer][i];
                    let dp = delta_a[0];
                    total += if labels[i] == 1.0 { -libm::log1p(dp / p) } else { -libm::log1p(-dp / (1.0 - p)) };
                    break;
                }
                let (fin, fout) = (dims[layer], dims[layer + 1]);
                delta_z = (0..fout)
                    .map(|jj| (0..fin).map(|k| delta_a[k] * weights[layer][k * fout + jj]).sum())
                    .collect();
            }
        }
        total / n as f64
    };
    let mut worst = 0.0f64;
    for l in 0..model.layers() {
        let (fin, fout) = (dims[l], dims[l + 1]);
        let a = &acts[l];
        for k in 0..=fin {
            for j in 0..fout {
                // k == fin stands for the bias of neuron j
                let analytic = if k == fin { grads.biases[l].value(j) } else { grads.weights[l].value(k * fout + j) };
                let input = |i: usize| if k == fin { 1.0 } else { a[i * fin + k] };
                let plus = loss_shift(l, j, &|i| input(i) * eps);
                let minus = loss_shift(l, j, &|i| -input(i) * eps);
                let central = (plus - minus) / (2.0 * eps);
                let denom = analytic.abs().max(central.abs()).max(1e-12);
                worst = worst.max((analytic - central).abs() / denom);
            }
        }
    }
    Ok(worst)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, DataSpec};

    fn dataset(rows: &[&[f64]], labels: &[f64], format: ScalarFormat) -> Dataset {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Dataset::new(
            Matrix::from_f64(rows.len(), d, &flat, format).unwrap(),
            Matrix::from_f64(labels.len(), 1, labels, format).unwrap(),
        )
        .unwrap()
    }

    fn zero_model(dims: &[usize], format: ScalarFormat) -> MlpModel {
        let mut m = init_model(dims, format, 0).unwrap();
        for w in m.weights_mut() {
            *w = Matrix::zeros(w.rows(), w.cols(), format);
        }
        m
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_model(&layer_dims(5, 5, 10), ScalarFormat::F32, 9).unwrap();
        let b = init_model(&layer_dims(5, 5, 10), ScalarFormat::F32, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 511);
        assert!(a.biases().iter().all(|b| b.to_f64().iter().all(|&v| v == 0.0)));
        assert_eq!(init_model(&default_dims(), ScalarFormat::F64, 0).unwrap().param_count(), 511);
        assert_eq!(init_model(&layer_dims(5, 4, 10), ScalarFormat::F64, 0).unwrap().param_count(), 401);
        assert!(matches!(init_model(&[5, 0, 1], ScalarFormat::F64, 0), Err(MlpError::OutOfRange(_))));
        assert!(matches!(init_model(&[5], ScalarFormat::F64, 0), Err(MlpError::OutOfRange(_))));
    }

    #[test]
    fn zero_model_outputs_one_half() {
        let m = zero_model(&default_dims(), ScalarFormat::F16);
        let batch = Matrix::from_f64(2, 5, &[1.0, 2.0, 3.0, 4.0, 5.0, -1.0, 0.0, 0.5, 7.0, 1.0], ScalarFormat::F16)
            .unwrap();
        let t = forward(&m, &batch).unwrap();
        for a in &t.activations[1..] {
            assert!(a.to_f64().iter().all(|&v| v == 0.5));
        }
        let single = MlpModel::from_parts(
            vec![1, 1],
            vec![Matrix::from_f64(1, 1, &[1.0], ScalarFormat::F64).unwrap()],
            vec![Matrix::zeros(1, 1, ScalarFormat::F64)],
            ScalarFormat::F64,
        )
        .unwrap();
        let t = forward(&single, &Matrix::zeros(1, 1, ScalarFormat::F64)).unwrap();
        assert_eq!(t.output().value(0), 0.5);
        assert!(matches!(forward(&single, &Matrix::zeros(1, 2, ScalarFormat::F64)), Err(MlpError::ShapeMismatch(_))));
    }

    #[test]
    fn output_delta_vanishes_when_prediction_matches() {
        let m = init_model(&[2, 1], ScalarFormat::F64, 1).unwrap();
        let batch = Matrix::from_f64(2, 2, &[0.3, -0.2, 1.0, 0.5], ScalarFormat::F64).unwrap();
        let mut trace = forward(&m, &batch).unwrap();
        // force outputs equal to the labels
        let forced = Matrix::from_f64(2, 1, &[1.0, 0.0], ScalarFormat::F64).unwrap();
        *trace.activations.last_mut().unwrap() = forced.clone();
        let g = backward(&m, &trace, &forced).unwrap();
        assert!(g.weights[0].to_f64().iter().chain(g.biases[0].to_f64().iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_weight_gradient_by_hand() {
        // y_hat = s(w x + b), dL/dw = (y_hat - y) x
        let (w, b, x, y) = (0.7, -0.2, 1.5, 1.0);
        let m = MlpModel::from_parts(
            vec![1, 1],
            vec![Matrix::from_f64(1, 1, &[w], ScalarFormat::F64).unwrap()],
            vec![Matrix::from_f64(1, 1, &[b], ScalarFormat::F64).unwrap()],
            ScalarFormat::F64,
        )
        .unwrap();
        let data = dataset(&[&[x]], &[y], ScalarFormat::F64);
        let (g, loss) = gradients(&m, &data).unwrap();
        let yh = 1.0 / (1.0 + libm::exp(-(w * x + b)));
        assert!((g.weights[0].value(0) - (yh - y) * x).abs() < 1e-15);
        assert!((g.biases[0].value(0) - (yh - y)).abs() < 1e-15);
        assert!((loss + libm::log(yh)).abs() < 1e-15);
    }

    #[test]
    fn apply_update_examples() {
        let m = MlpModel::from_parts(
            vec![1, 1],
            vec![Matrix::from_f64(1, 1, &[1.0], ScalarFormat::F64).unwrap()],
            vec![Matrix::zeros(1, 1, ScalarFormat::F64)],
            ScalarFormat::F64,
        )
        .unwrap();
        let mut g = GradientSet::zeros_like(&m, ScalarFormat::F64);
        assert_eq!(apply_update(&m, &g, 0.1).unwrap(), m);
        g.weights[0] = Matrix::from_f64(1, 1, &[0.5], ScalarFormat::F64).unwrap();
        assert_eq!(apply_update(&m, &g, 0.0).unwrap(), m);
        assert_eq!(apply_update(&m, &g, 0.1).unwrap().weights()[0].value(0), 0.95);
        let other = init_model(&[2, 1], ScalarFormat::F64, 0).unwrap();
        assert!(matches!(apply_update(&other, &g, 0.1), Err(MlpError::ShapeMismatch(_))));
    }

    #[test]
    fn train_epoch_composes_the_primitives() {
        let spec = DataSpec { n_train: 64, seed: 2, ..DataSpec::default() };
        for fmt in [ScalarFormat::F64, ScalarFormat::F32, ScalarFormat::F16] {
            let (train, _, _) = generate(&spec, fmt).unwrap();
            let m = init_model(&default_dims(), fmt, 4).unwrap();
            let trace = forward(&m, train.features()).unwrap();
            let g = backward(&m, &trace, train.labels()).unwrap();
            let composed = apply_update(&m, &g, 0.5).unwrap();
            let (stepped, loss) = train_epoch(&m, &train, 0.5).unwrap();
            assert_eq!(stepped, composed);
            assert!((loss - core::f64::consts::LN_2).abs() < 0.3, "{loss}");
            let (same, _) = train_epoch(&m, &train, 0.0).unwrap();
            assert_eq!(same, m);
        }
    }

    #[test]
    fn native_matches_emulation() {
        let spec = DataSpec { n_train: 40, seed: 8, ..DataSpec::default() };
        for fmt in [ScalarFormat::F64, ScalarFormat::F32] {
            let (train, _, _) = generate(&spec, fmt).unwrap();
            let m = init_model(&default_dims(), fmt, 6).unwrap();
            let mut native = m.clone();
            let mut soft = m;
            for _ in 0..3 {
                native = train_epoch_with(&native, &train, 0.5, Exec::Auto).unwrap().0;
                soft = train_epoch_with(&soft, &train, 0.5, Exec::Emulated).unwrap().0;
            }
            assert_eq!(native, soft);
        }
    }

    #[test]
    fn evaluate_examples() {
        let data = dataset(&[&[1.0], &[-1.0], &[2.0], &[-2.0]], &[1.0, 0.0, 1.0, 0.0], ScalarFormat::F64);
        assert_eq!(evaluate(&zero_model(&[1, 3, 1], ScalarFormat::F64), &data).unwrap(), 0.5);
        let perfect = MlpModel::from_parts(
            vec![1, 1],
            vec![Matrix::from_f64(1, 1, &[50.0], ScalarFormat::F64).unwrap()],
            vec![Matrix::zeros(1, 1, ScalarFormat::F64)],
            ScalarFormat::F64,
        )
        .unwrap();
        assert_eq!(evaluate(&perfect, &data).unwrap(), 1.0);
        assert_eq!(evaluate(&perfect, &data.select(&[])), Err(MlpError::EmptyDataset));
        assert_eq!(train_epoch(&perfect, &data.select(&[]), 0.1), Err(MlpError::EmptyDataset));
    }

    #[test]
    fn grad_check_examples() {
        let m = MlpModel::from_parts(
            vec![1, 1],
            vec![Matrix::from_f64(1, 1, &[0.3], ScalarFormat::F64).unwrap()],
            vec![Matrix::zeros(1, 1, ScalarFormat::F64)],
            ScalarFormat::F64,
        )
        .unwrap();
        let data = dataset(&[&[0.8], &[-0.4]], &[1.0, 0.0], ScalarFormat::F64);
        assert!(grad_check(&m, &data, 1e-5).unwrap() <= 1e-9);
        assert!(matches!(grad_check(&m, &data, 0.0), Err(MlpError::InvalidArgument(_))));
        let m32 = init_model(&[1, 1], ScalarFormat::F32, 0).unwrap();
        assert!(matches!(grad_check(&m32, &data, 1e-5), Err(MlpError::InvalidArgument(_))));
    }
}
