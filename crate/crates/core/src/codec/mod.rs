//! Feature-tensor compression: quantization, entropy coding, and the
//! per-codec payload packing used inside tensor frames.

pub mod entropy;
pub mod quant;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use entropy::{entropy_decode, entropy_encode, order0_entropy};
pub use quant::{dequantize, estimate_quant_params, quantize, QuantParams};
pub use crate::transport::wire::{decode_frame, encode_frame, TensorFrame};

/// Codec selector; the discriminant is the wire byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum CodecId {
    Float32Raw = 0,
    U8Quant = 1,
    U8QuantHuffman = 2,
}

impl CodecId {
    pub const ALL: [CodecId; 3] = [CodecId::Float32Raw, CodecId::U8Quant, CodecId::U8QuantHuffman];

    pub fn from_wire(b: u8) -> Option<Self> {
        match b {
            0 => Some(CodecId::Float32Raw),
            1 => Some(CodecId::U8Quant),
            2 => Some(CodecId::U8QuantHuffman),
            _ => None,
        }
    }

    pub fn is_quantized(self) -> bool {
        self != CodecId::Float32Raw
    }

    /// Short name used by the CLI, CSV output and the control API.
    pub fn name(self) -> &'static str {
        match self {
            CodecId::Float32Raw => "f32",
            CodecId::U8Quant => "u8",
            CodecId::U8QuantHuffman => "u8h",
        }
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodecId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CodecId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown codec '{s}' (valid: f32, u8, u8h)")))
    }
}

/// Where the quantization interval comes from when encoding a frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum QuantMode {
    /// Mean and standard deviation of the tensor being sent.
    #[default]
    Empirical,
    /// A fixed interval, e.g. [`QuantParams::standard_normal`].
    Fixed(QuantParams),
}

/// Packs `t` for transmission. Returns the payload and, for quantized
/// codecs, the interval that must accompany it.
pub fn encode_payload(t: &Tensor, codec: CodecId, mode: QuantMode) -> Result<(Vec<u8>, Option<QuantParams>)> {
    match codec {
        CodecId::Float32Raw => Ok((t.to_le_bytes(), None)),
        CodecId::U8Quant | CodecId::U8QuantHuffman => {
            let q = match mode {
                QuantMode::Empirical => estimate_quant_params([t])?,
                QuantMode::Fixed(q) => q,
            };
            let codes = quantize(t, &q);
            let payload = if codec == CodecId::U8QuantHuffman {
                entropy_encode(&codes)?
            } else {
                codes
            };
            Ok((payload, Some(q)))
        }
    }
}

/// Inverse of [`encode_payload`].
pub fn decode_payload(
    payload: &[u8],
    shape: &[usize],
    codec: CodecId,
    quant: Option<&QuantParams>,
) -> Result<Tensor> {
    match codec {
        CodecId::Float32Raw => Tensor::from_le_bytes(shape.to_vec(), payload),
        CodecId::U8Quant | CodecId::U8QuantHuffman => {
            let q = quant.ok_or_else(|| Error::Malformed("quantized payload without interval".into()))?;
            let codes = if codec == CodecId::U8QuantHuffman {
                entropy_decode(payload)?
            } else {
                payload.to_vec()
            };
            dequantize(&codes, shape, q)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codec_names_round_trip() {
        for c in CodecId::ALL {
            assert_eq!(c.name().parse::<CodecId>().unwrap(), c);
            assert_eq!(CodecId::from_wire(c as u8), Some(c));
        }
        assert!("f16".parse::<CodecId>().is_err());
        assert_eq!(CodecId::from_wire(9), None);
    }

    #[test]
    fn payload_sizes_are_4n_and_n() {
        let t = Tensor::new(vec![2, 8], (0..16).map(|i| i as f32 / 3.0).collect()).unwrap();
        let (raw, q) = encode_payload(&t, CodecId::Float32Raw, QuantMode::Empirical).unwrap();
        assert_eq!((raw.len(), q), (64, None));
        let (u8s, q) = encode_payload(&t, CodecId::U8Quant, QuantMode::Empirical).unwrap();
        assert_eq!(u8s.len(), 16);
        let back = decode_payload(&u8s, &[2, 8], CodecId::U8Quant, q.as_ref()).unwrap();
        let half_step = q.unwrap().step() / 2.0;
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!(f64::from((a - b).abs()) <= half_step + 1e-6);
        }
    }
}
