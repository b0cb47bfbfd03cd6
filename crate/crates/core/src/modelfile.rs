//! CIMF model files.
//!
//! ```text
//! "CIMF"  version:u8=1
//! input_ndim:u8  input_dims:u32 * ndim
//! layer_count:u32
//! per layer:
//!   kind:u8  name_len:u16  name:utf8  n_inputs:u8  inputs:u32 * n
//!   kind metadata (see below)
//! weight_count:u64  weights:f32 * weight_count      (layer order)
//! model_hash:u64                                    FNV-1a 64 over all preceding bytes
//! ```
//!
//! Metadata and weight order per kind (all integers u32, all little-endian):
//!
//! | kind | tag | metadata                         | weights                      |
//! |------|-----|----------------------------------|------------------------------|
//! | Conv2D        | 0 | in, out, kh, kw, stride, pad | `out*in*kh*kw`          |
//! | BatchNorm     | 1 | channels, eps:f32         | gamma, beta, mean, var          |
//! | ReLU          | 2 | -                         | -                               |
//! | Add           | 3 | -                         | -                               |
//! | MaxPool       | 4 | kernel, stride            | -                               |
//! | GlobalAvgPool | 5 | -                         | -                               |
//! | Dense         | 6 | in, out                   | `out*in` weights, `out` bias    |
//! | Flatten       | 7 | -                         | -                               |
//! | Softmax       | 8 | -                         | -                               |

use crate::error::{Error, Result};
use crate::graph::{BatchNorm, Conv2d, Dense, Layer, LayerKind, ModelGraph, Pool};

pub const MAGIC: &[u8; 4] = b"CIMF";
pub const VERSION: u8 = 1;

const MAX_LAYERS: usize = 4096;
const MAX_DIM: usize = 1 << 16;
const MAX_INPUT_RANK: usize = 8;
const MAX_CHANNELS: usize = 1 << 14;
const MAX_KERNEL: usize = 64;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn compute_hash(model: &ModelGraph) -> u64 {
    fnv1a64(&serialize_body(model))
}

/// Serializes `model`; the trailing hash equals [`ModelGraph::model_hash`].
pub fn save_model(model: &ModelGraph) -> Vec<u8> {
    let mut out = serialize_body(model);
    let hash = fnv1a64(&out);
    out.extend_from_slice(&hash.to_le_bytes());
    out
}

fn serialize_body(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(model.input_shape().len() as u8);
    for &d in model.input_shape() {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, model.len());
    let mut weights: Vec<f32> = Vec::new();
    for layer in model.layers() {
        out.push(kind_tag(&layer.kind));
        out.extend_from_slice(&(layer.name.len() as u16).to_le_bytes());
        out.extend_from_slice(layer.name.as_bytes());
        out.push(layer.inputs.len() as u8);
        for &i in &layer.inputs {
            put_u32(&mut out, i);
        }
        match &layer.kind {
            LayerKind::Conv2d(c) => {
                for v in [c.in_channels, c.out_channels, c.kernel_h, c.kernel_w, c.stride, c.padding] {
                    put_u32(&mut out, v);
                }
                weights.extend_from_slice(&c.weights);
            }
            LayerKind::BatchNorm(bn) => {
                put_u32(&mut out, bn.channels());
                out.extend_from_slice(&bn.eps.to_le_bytes());
                for v in [&bn.gamma, &bn.beta, &bn.mean, &bn.var] {
                    weights.extend_from_slice(v);
                }
            }
            LayerKind::MaxPool(p) => {
                put_u32(&mut out, p.kernel);
                put_u32(&mut out, p.stride);
            }
            LayerKind::Dense(d) => {
                put_u32(&mut out, d.in_features);
                put_u32(&mut out, d.out_features);
                weights.extend_from_slice(&d.weights);
                weights.extend_from_slice(&d.bias);
            }
            LayerKind::Relu | LayerKind::Add | LayerKind::GlobalAvgPool | LayerKind::Flatten | LayerKind::Softmax => {}
        }
    }
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn kind_tag(kind: &LayerKind) -> u8 {
    match kind {
        LayerKind::Conv2d(_) => 0,
        LayerKind::BatchNorm(_) => 1,
        LayerKind::Relu => 2,
        LayerKind::Add => 3,
        LayerKind::MaxPool(_) => 4,
        LayerKind::GlobalAvgPool => 5,
        LayerKind::Dense(_) => 6,
        LayerKind::Flatten => 7,
        LayerKind::Softmax => 8,
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn bounded(&mut self, what: &str, max: usize) -> Result<usize> {
        let v = self.u32()? as usize;
        if v > max {
            return Err(Error::Malformed(format!("{what} = {v} exceeds limit {max}")));
        }
        Ok(v)
    }
}

/// Parsed layer header whose weights have not been read yet.
enum Pending {
    Conv { cin: usize, cout: usize, kh: usize, kw: usize, stride: usize, pad: usize },
    BatchNorm { channels: usize, eps: f32 },
    Dense { fin: usize, fout: usize },
    Plain(LayerKind),
}

impl Pending {
    fn weight_count(&self) -> Option<usize> {
        match *self {
            Pending::Conv { cin, cout, kh, kw, .. } => cout.checked_mul(cin)?.checked_mul(kh)?.checked_mul(kw),
            Pending::BatchNorm { channels, .. } => channels.checked_mul(4),
            Pending::Dense { fin, fout } => fout.checked_mul(fin)?.checked_add(fout),
            Pending::Plain(_) => Some(0),
        }
    }
}

/// Parses and verifies a CIMF file. Structure is checked before the hash so
/// that a short file reports truncation rather than a hash mismatch.
pub fn load_model(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| Error::BadMagic { expected: "CIMF" })? != MAGIC {
        return Err(Error::BadMagic { expected: "CIMF" });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let ndim = r.u8()? as usize;
    if ndim == 0 || ndim > MAX_INPUT_RANK {
        return Err(Error::Malformed(format!("input rank {ndim}")));
    }
    let mut input_shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        input_shape.push(r.bounded("input dim", MAX_DIM)?);
    }
    let count = r.bounded("layer count", MAX_LAYERS)?;

    let mut headers: Vec<(String, Vec<usize>, Pending)> = Vec::with_capacity(count.min(r.remaining()));
    for id in 0..count {
        let tag = r.u8()?;
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Malformed(format!("layer {id}: name is not UTF-8")))?
            .to_string();
        let n_inputs = r.u8()? as usize;
        let mut inputs = Vec::with_capacity(n_inputs);
        for _ in 0..n_inputs {
            inputs.push(r.bounded("input id", MAX_LAYERS)?);
        }
        let pending = match tag {
            0 => Pending::Conv {
                cin: r.bounded("in_channels", MAX_CHANNELS)?,
                cout: r.bounded("out_channels", MAX_CHANNELS)?,
                kh: r.bounded("kernel_h", MAX_KERNEL)?,
                kw: r.bounded("kernel_w", MAX_KERNEL)?,
                stride: r.bounded("stride", MAX_KERNEL)?,
                pad: r.bounded("padding", MAX_KERNEL)?,
            },
            1 => Pending::BatchNorm {
                channels: r.bounded("channels", MAX_CHANNELS)?,
                eps: r.f32()?,
            },
            2 => Pending::Plain(LayerKind::Relu),
            3 => Pending::Plain(LayerKind::Add),
            4 => Pending::Plain(LayerKind::MaxPool(Pool {
                kernel: r.bounded("pool kernel", MAX_KERNEL)?,
                stride: r.bounded("pool stride", MAX_KERNEL)?,
            })),
            5 => Pending::Plain(LayerKind::GlobalAvgPool),
            6 => Pending::Dense {
                fin: r.bounded("in_features", 1 << 24)?,
                fout: r.bounded("out_features", 1 << 16)?,
            },
            7 => Pending::Plain(LayerKind::Flatten),
            8 => Pending::Plain(LayerKind::Softmax),
            other => return Err(Error::Malformed(format!("layer {id}: unknown kind tag {other}"))),
        };
        headers.push((name, inputs, pending));
    }

    let declared = r.u64()?;
    let expected = headers
        .iter()
        .try_fold(0usize, |acc, (_, _, p)| acc.checked_add(p.weight_count()?))
        .ok_or_else(|| Error::Malformed("weight count overflows".into()))?;
    if declared != expected as u64 {
        return Err(Error::Malformed(format!(
            "weight blob declares {declared} values, layers need {expected}"
        )));
    }
    let blob_bytes = expected
        .checked_mul(4)
        .ok_or_else(|| Error::Malformed("weight blob too large".into()))?;
    let need = r.pos() + blob_bytes + 8;
    if bytes.len() < need {
        return Err(Error::Truncated {
            needed: need,
            available: bytes.len(),
        });
    }
    if bytes.len() > need {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after model hash",
            bytes.len() - need
        )));
    }
    let body_end = need - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::HashMismatch { stored, computed });
    }

    let mut floats = bytes[r.pos()..body_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };

    let mut layers = Vec::with_capacity(headers.len());
    for (name, inputs, pending) in headers {
        let kind = match pending {
            Pending::Conv { cin, cout, kh, kw, stride, pad } => LayerKind::Conv2d(Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                padding: pad,
                weights: take(cout * cin * kh * kw),
            }),
            Pending::BatchNorm { channels, eps } => LayerKind::BatchNorm(BatchNorm {
                gamma: take(channels),
                beta: take(channels),
                mean: take(channels),
                var: take(channels),
                eps,
            }),
            Pending::Dense { fin, fout } => LayerKind::Dense(Dense {
                in_features: fin,
                out_features: fout,
                weights: take(fin * fout),
                bias: take(fout),
            }),
            Pending::Plain(kind) => kind,
        };
        layers.push(Layer::new(name, kind, inputs));
    }
    let model = ModelGraph::new(input_shape, layers)?;
    debug_assert_eq!(model.model_hash(), stored);
    Ok(model)
}
