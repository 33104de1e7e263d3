//! Versioned binary checkpoints, all integers little-endian.
//!
//! ```text
//! "HFL1"
//! u32 descriptor length, descriptor bytes      compute format, e.g. "f32"
//! u32 layer count, u32 per layer width
//! per layer: weights then biases, row-major, each scalar's bit pattern in
//!            ceil(total_bits / 8) bytes of its matrix's storage format
//! ```
//!
//! A compressed model appends tagged sections, each `tag, u32 length,
//! payload`, then a footer `u64 offset of the first section, "HFLS"`:
//!
//! - `M` per weight matrix, its mask packed LSB-first in `ceil(len / 8)` bytes
//! - `C` per weight matrix, `u32 k` (0 when unclustered), k centroids as f64
//!   bits, `u32 n` and n `u32` cluster indices
//! - `Q` per weight matrix, `u8` flag then, if set, `u32 bits, f64 scale,
//!   u32 zero point`; affine-coded matrices store their codes at that width
//! - `P` the plan: origin descriptor, `f64` prune ratio, target descriptor
//!   (empty when absent), `u32` cluster count (0 when absent)

use hetfed_core::compress::{AffineParams, Codebook, CompressedState, CompressionPlan, Mask};
use hetfed_core::mlp::{Matrix, MlpModel};
use hetfed_core::numfmt::ScalarFormat;

pub const MAGIC: &[u8; 4] = b"HFL1";
pub const FOOTER_MAGIC: &[u8; 4] = b"HFLS";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("bad format descriptor: {0}")]
    BadDescriptor(String),
    #[error("bad section `{0}`")]
    BadSection(char),
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("inconsistent model: {0}")]
    Model(String),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn matrix(&mut self, m: &Matrix) {
        let width = m.format().byte_width() as usize;
        for &bits in m.bits() {
            self.0.extend_from_slice(&bits.to_le_bytes()[..width]);
        }
    }
    fn section(&mut self, tag: u8, body: Writer) {
        self.u8(tag);
        self.u32(body.0.len() as u32);
        self.0.extend_from_slice(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::BadDescriptor("not UTF-8".into()))
    }
    fn format(&mut self) -> Result<ScalarFormat, CheckpointError> {
        let s = self.str()?;
        s.parse().map_err(|_| CheckpointError::BadDescriptor(s.to_string()))
    }
    fn matrix(&mut self, rows: usize, cols: usize, format: ScalarFormat) -> Result<Matrix, CheckpointError> {
        let width = format.byte_width() as usize;
        let raw = self.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(width)).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| {
                let mut b = [0u8; 8];
                b[..width].copy_from_slice(c);
                u64::from_le_bytes(b)
            })
            .collect();
        Matrix::from_bits(rows, cols, data, format).map_err(|e| CheckpointError::Model(e.to_string()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serializes a model, plus its compression state when given.
pub fn encode(model: &MlpModel, state: Option<&CompressedState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.str(&model.format().to_string());
    w.u32(model.dims().len() as u32);
    for &d in model.dims() {
        w.u32(d as u32);
    }
    for (wm, bm) in model.weights().iter().zip(model.biases()) {
        w.matrix(wm);
        w.matrix(bm);
    }
    let Some(state) = state else { return w.0 };
    let offset = w.0.len() as u64;

    let mut m = Writer(Vec::new());
    for mask in &state.masks {
        let mut bytes = mask.as_raw_slice().to_vec();
        bytes.truncate(mask.len().div_ceil(8));
        // bits past the end are unspecified in the backing store
        if mask.len() % 8 != 0 {
            if let Some(last) = bytes.last_mut() {
                *last &= (1u8 << (mask.len() % 8)) - 1;
            }
        }
        m.0.extend_from_slice(&bytes);
    }
    w.section(b'M', m);

    let mut c = Writer(Vec::new());
    for book in &state.codebooks {
        match book {
            None => c.u32(0),
            Some(b) => {
                c.u32(b.k() as u32);
                b.centroids.iter().for_each(|&v| c.f64(v));
                c.u32(b.indices.len() as u32);
                b.indices.iter().for_each(|&i| c.u32(i));
            }
        }
    }
    w.section(b'C', c);

    let mut q = Writer(Vec::new());
    for params in &state.affine {
        match params {
            None => q.u8(0),
            Some(p) => {
                q.u8(1);
                q.u32(p.bits);
                q.f64(p.scale);
                q.u32(p.zero_point);
            }
        }
    }
    w.section(b'Q', q);

    let mut p = Writer(Vec::new());
    p.str(&state.origin_format.to_string());
    p.f64(state.plan.prune_ratio);
    p.str(&state.plan.target_format.map(|f| f.to_string()).unwrap_or_default());
    p.u32(state.plan.cluster_k.unwrap_or(0) as u32);
    w.section(b'P', p);

    w.u64(offset);
    w.0.extend_from_slice(FOOTER_MAGIC);
    w.0
}

struct Sections {
    masks: Option<Vec<Mask>>,
    codebooks: Option<Vec<Option<Codebook>>>,
    affine: Option<Vec<Option<AffineParams>>>,
    plan: Option<(ScalarFormat, CompressionPlan)>,
}

fn read_sections(buf: &[u8], shapes: &[usize]) -> Result<Sections, CheckpointError> {
    let mut r = Reader::new(buf);
    let mut s = Sections { masks: None, codebooks: None, affine: None, plan: None };
    while !r.done() {
        let tag = r.u8()?;
        let len = r.u32()? as usize;
        let mut body = Reader::new(r.take(len)?);
        let bad = || CheckpointError::BadSection(tag as char);
        match tag {
            b'M' => {
                let mut masks = Vec::with_capacity(shapes.len());
                for &n in shapes {
                    let mut mask = Mask::from_vec(body.take(n.div_ceil(8))?.to_vec());
                    mask.truncate(n);
                    masks.push(mask);
                }
                s.masks = Some(masks);
            }
            b'C' => {
                let mut books = Vec::with_capacity(shapes.len());
                for _ in shapes {
                    let k = body.u32()? as usize;
                    if k == 0 {
                        books.push(None);
                        continue;
                    }
                    let centroids = (0..k).map(|_| body.f64()).collect::<Result<Vec<_>, _>>()?;
                    let n = body.u32()? as usize;
                    let indices = (0..n).map(|_| body.u32()).collect::<Result<Vec<_>, _>>()?;
                    if indices.iter().any(|&i| i as usize >= k) {
                        return Err(bad());
                    }
                    books.push(Some(Codebook { centroids, indices }));
                }
                s.codebooks = Some(books);
            }
            b'Q' => {
                let mut params = Vec::with_capacity(shapes.len());
                for _ in shapes {
                    params.push(match body.u8()? {
                        0 => None,
                        1 => {
                            let p = AffineParams { bits: body.u32()?, scale: body.f64()?, zero_point: body.u32()? };
                            ScalarFormat::affine(p.bits, p.scale, p.zero_point).map_err(|_| bad())?;
                            Some(p)
                        }
                        _ => return Err(bad()),
                    });
                }
                s.affine = Some(params);
            }
            b'P' => {
                let origin = body.format()?;
                let prune_ratio = body.f64()?;
                let target = body.str()?;
                let target_format = if target.is_empty() {
                    None
                } else {
                    Some(target.parse().map_err(|_| CheckpointError::BadDescriptor(target.to_string()))?)
                };
                let k = body.u32()? as usize;
                let plan = CompressionPlan { prune_ratio, target_format, cluster_k: (k > 0).then_some(k) };
                s.plan = Some((origin, plan));
            }
            _ => return Err(bad()),
        }
        if !body.done() {
            return Err(bad());
        }
    }
    Ok(s)
}

/// Parses a checkpoint written by [`encode`].
pub fn decode(buf: &[u8]) -> Result<(MlpModel, Option<CompressedState>), CheckpointError> {
    let mut r = Reader::new(buf);
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let format = r.format()?;
    let count = r.u32()? as usize;
    let dims = (0..count).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(CheckpointError::Model(format!("bad layer dims {dims:?}")));
    }
    let header = Header { format, dims, len: r.pos };
    let footer = buf.len() >= header.len + 12 && &buf[buf.len() - 4..] == FOOTER_MAGIC;
    if !footer {
        return parameters(buf, &header, None);
    }
    // a plain file can end in the footer magic by chance
    compressed(buf, &header).or_else(|e| parameters(buf, &header, None).map_err(|_| e))
}

struct Header {
    format: ScalarFormat,
    dims: Vec<usize>,
    len: usize,
}

fn compressed(buf: &[u8], header: &Header) -> Result<(MlpModel, Option<CompressedState>), CheckpointError> {
    let off_bytes: [u8; 8] = buf[buf.len() - 12..buf.len() - 4].try_into().expect("8 bytes");
    let offset = usize::try_from(u64::from_le_bytes(off_bytes)).map_err(|_| CheckpointError::Truncated)?;
    if offset < header.len || offset > buf.len() - 12 {
        return Err(CheckpointError::Truncated);
    }
    let shapes: Vec<usize> = header.dims.windows(2).map(|p| p[0] * p[1]).collect();
    let sections = read_sections(&buf[offset..buf.len() - 12], &shapes)?;
    parameters(&buf[..offset], header, Some(sections))
}

fn parameters(
    buf: &[u8],
    header: &Header,
    sections: Option<Sections>,
) -> Result<(MlpModel, Option<CompressedState>), CheckpointError> {
    let (format, dims) = (header.format, &header.dims);
    let affine = sections.as_ref().and_then(|s| s.affine.clone());
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    let mut data = Reader::new(buf);
    data.pos = header.len;
    for (l, pair) in dims.windows(2).enumerate() {
        let wfmt = affine.as_ref().and_then(|a| a[l]).map_or(format, |p| p.format());
        weights.push(data.matrix(pair[0], pair[1], wfmt)?);
        biases.push(data.matrix(1, pair[1], format)?);
    }
    if !data.done() {
        return Err(CheckpointError::TrailingBytes(buf.len() - data.pos));
    }
    let model = MlpModel::from_parts(dims.clone(), weights, biases, format)
        .map_err(|e| CheckpointError::Model(e.to_string()))?;

    let state = sections.map(|s| {
        let mut state = CompressedState::identity(&model);
        if let Some(m) = s.masks {
            state.masks = m;
        }
        if let Some(c) = s.codebooks {
            state.codebooks = c;
        }
        if let Some(a) = s.affine {
            state.affine = a;
        }
        if let Some((origin, plan)) = s.plan {
            state.origin_format = origin;
            state.plan = plan;
        }
        state
    });
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hetfed_core::compress::apply_plan;
    use hetfed_core::mlp::{default_dims, init_model, layer_dims};

    #[test]
    fn plain_layout_is_exact() {
        let m = init_model(&layer_dims(5, 5, 10), ScalarFormat::F64, 3).unwrap();
        let bytes = encode(&m, None);
        // magic, "f64" with its length, 7 dims with their count, 511 scalars
        assert_eq!(bytes.len(), 4 + 4 + 3 + 4 + 7 * 4 + 511 * 8);
        assert_eq!(&bytes[..4], b"HFL1");
        assert_eq!(decode(&bytes).unwrap(), (m, None));
    }

    #[test]
    fn narrow_formats_use_narrow_slots() {
        let f = ScalarFormat::float(4, 3).unwrap();
        let m = init_model(&default_dims(), f, 3).unwrap();
        let bytes = encode(&m, None);
        let header = 4 + 4 + "float(4,3)".len() + 4 + 7 * 4;
        assert_eq!(bytes.len(), header + m.param_count());
        assert_eq!(decode(&bytes).unwrap().0, m);
    }

    #[test]
    fn compressed_state_round_trips() {
        let g = init_model(&default_dims(), ScalarFormat::F64, 8).unwrap();
        let plans = [
            CompressionPlan { prune_ratio: 0.3, target_format: Some(ScalarFormat::F16), cluster_k: Some(4) },
            CompressionPlan { prune_ratio: 0.5, target_format: Some(ScalarFormat::affine(8, 1.0, 0).unwrap()), cluster_k: None },
            CompressionPlan { prune_ratio: 0.0, target_format: Some(ScalarFormat::affine(12, 1.0, 0).unwrap()), cluster_k: Some(3) },
            CompressionPlan::none(),
        ];
        for plan in plans {
            let (local, state) = apply_plan(&g, &plan, 1).unwrap();
            let bytes = encode(&local, Some(&state));
            assert_eq!(decode(&bytes).unwrap(), (local, Some(state)));
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = init_model(&default_dims(), ScalarFormat::F32, 0).unwrap();
        let bytes = encode(&m, None);
        assert_eq!(decode(b"HFL2"), Err(CheckpointError::BadMagic));
        assert_eq!(decode(&bytes[..bytes.len() - 1]).unwrap_err(), CheckpointError::Truncated);
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode(&extra).unwrap_err(), CheckpointError::TrailingBytes(1));
        let mut bad = bytes;
        bad[8] = b'x';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadDescriptor(_))));
    }
}
