//! The CITF wire protocol.
//!
//! Every message is
//!
//! ```text
//! "CITF"  version:u8=1  msg_type:u8  body  crc:u32
//! ```
//!
//! with all integers little-endian and `crc` the CRC-32 (IEEE) of every byte
//! after the magic up to the CRC itself. Bodies are self-delimiting:
//!
//! | type | name         | body                                                                     |
//! |------|--------------|--------------------------------------------------------------------------|
//! | 1    | TensorFrame  | frame_id u32, split_layer u16, codec u8, ndim u8, dims u32*ndim,         |
//! |      |              | [lo f32, hi f32 iff codec >= 1], payload_len u32, payload                |
//! | 2    | ResultFrame  | frame_id u32, server_compute_us u32, k u8, (class_id u16, score f32)*k   |
//! | 3    | Hello        | protocol_version u8, model_hash u64                                      |
//! | 4    | HelloAck     | protocol_version u8, model_hash u64                                      |
//! | 5    | ConfigUpdate | split_layer u16, codec u8                                                |
//! | 6    | Error        | code u8, message_len u16, message utf8                                   |
//!
//! `split_layer = 0xFFFF` marks the raw model input (cloud-only inference).

use std::io::Read;

use thiserror::Error;

use crate::codec::{entropy, CodecId, QuantParams};

pub const MAGIC: &[u8; 4] = b"CITF";
pub const VERSION: u8 = 1;
pub const SPLIT_INPUT: u16 = 0xFFFF;

pub const MAX_NDIM: usize = 8;
pub const MAX_ELEMENTS: usize = 1 << 24;
pub const MAX_PAYLOAD: usize = 1 << 26;
pub const MAX_TOP_K: usize = 32;

/// Bytes in a TensorFrame message outside its dims and payload:
/// magic, version, type, frame_id, split, codec, ndim, payload_len, crc.
pub const TENSOR_FRAME_FIXED_LEN: usize = 4 + 1 + 1 + 4 + 2 + 1 + 1 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    TensorFrame = 1,
    ResultFrame = 2,
    Hello = 3,
    HelloAck = 4,
    ConfigUpdate = 5,
    Error = 6,
}

impl MsgType {
    fn from_wire(b: u8) -> Option<Self> {
        Some(match b {
            1 => MsgType::TensorFrame,
            2 => MsgType::ResultFrame,
            3 => MsgType::Hello,
            4 => MsgType::HelloAck,
            5 => MsgType::ConfigUpdate,
            6 => MsgType::Error,
            _ => return None,
        })
    }
}

/// Error codes carried in [`ErrorMessage::code`].
pub mod error_code {
    pub const HASH_MISMATCH: u8 = 1;
    pub const CORRUPT: u8 = 2;
    pub const INVALID_SPLIT: u8 = 3;
    pub const UNSUPPORTED_VERSION: u8 = 4;
    pub const UNEXPECTED_MESSAGE: u8 = 5;
    pub const UNKNOWN_TYPE: u8 = 6;
    pub const INFERENCE_FAILED: u8 = 7;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("message incomplete: need at least {needed} bytes")]
    Incomplete { needed: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unknown codec {0}")]
    UnknownCodec(u8),
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("connection closed mid-message")]
    UnexpectedEof,
    #[error("I/O error: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFrame {
    pub frame_id: u32,
    pub split_layer: u16,
    pub codec: CodecId,
    pub shape: Vec<usize>,
    /// Present iff `codec` is quantized.
    pub quant: Option<QuantParams>,
    pub payload: Vec<u8>,
}

impl TensorFrame {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Encoded message size without building it.
    pub fn wire_len(&self) -> usize {
        tensor_message_len(self.shape.len(), self.codec, self.payload.len())
    }
}

/// Size of an encoded TensorFrame message with the given rank, codec and payload.
pub fn tensor_message_len(ndim: usize, codec: CodecId, payload_len: usize) -> usize {
    TENSOR_FRAME_FIXED_LEN + 4 * ndim + if codec.is_quantized() { 8 } else { 0 } + payload_len
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultFrame {
    pub frame_id: u32,
    pub server_compute_us: u32,
    /// `(class_id, score)` sorted by descending score.
    pub top_k: Vec<(u16, f32)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hello {
    pub protocol_version: u8,
    pub model_hash: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfigUpdate {
    pub split_layer: u16,
    pub codec: CodecId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorMessage {
    pub code: u8,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Tensor(TensorFrame),
    Result(ResultFrame),
    Hello(Hello),
    HelloAck(Hello),
    Config(ConfigUpdate),
    Error(ErrorMessage),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Tensor(_) => MsgType::TensorFrame,
            Message::Result(_) => MsgType::ResultFrame,
            Message::Hello(_) => MsgType::Hello,
            Message::HelloAck(_) => MsgType::HelloAck,
            Message::Config(_) => MsgType::ConfigUpdate,
            Message::Error(_) => MsgType::Error,
        }
    }

    pub fn error(code: u8, message: impl Into<String>) -> Self {
        let mut message: String = message.into();
        if message.len() > u16::MAX as usize {
            let mut cut = u16::MAX as usize;
            while !message.is_char_boundary(cut) {
                cut -= 1;
            }
            message.truncate(cut);
        }
        Message::Error(ErrorMessage { code, message })
    }
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type() as u8);
    match msg {
        Message::Tensor(f) => {
            out.reserve(f.wire_len());
            out.extend_from_slice(&f.frame_id.to_le_bytes());
            out.extend_from_slice(&f.split_layer.to_le_bytes());
            out.push(f.codec as u8);
            out.push(f.shape.len() as u8);
            for &d in &f.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            if f.codec.is_quantized() {
                let (lo, hi) = f.quant.map_or((0.0f32, 0.0f32), |q| (q.lo(), q.hi()));
                out.extend_from_slice(&lo.to_le_bytes());
                out.extend_from_slice(&hi.to_le_bytes());
            }
            out.extend_from_slice(&(f.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&f.payload);
        }
        Message::Result(r) => {
            out.extend_from_slice(&r.frame_id.to_le_bytes());
            out.extend_from_slice(&r.server_compute_us.to_le_bytes());
            out.push(r.top_k.len() as u8);
            for &(class, score) in &r.top_k {
                out.extend_from_slice(&class.to_le_bytes());
                out.extend_from_slice(&score.to_le_bytes());
            }
        }
        Message::Hello(h) | Message::HelloAck(h) => {
            out.push(h.protocol_version);
            out.extend_from_slice(&h.model_hash.to_le_bytes());
        }
        Message::Config(c) => {
            out.extend_from_slice(&c.split_layer.to_le_bytes());
            out.push(c.codec as u8);
        }
        Message::Error(e) => {
            out.push(e.code);
            out.extend_from_slice(&(e.message.len() as u16).to_le_bytes());
            out.extend_from_slice(e.message.as_bytes());
        }
    }
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Encodes a tensor frame as a complete wire message.
pub fn encode_frame(frame: &TensorFrame) -> Vec<u8> {
    encode_message(&Message::Tensor(frame.clone()))
}

/// Decodes a complete wire message that must hold a tensor frame.
pub fn decode_frame(bytes: &[u8]) -> Result<TensorFrame, WireError> {
    let (msg, used) = decode_message(bytes)?;
    if used != bytes.len() {
        return Err(WireError::Malformed(format!(
            "{} bytes after the end of the message",
            bytes.len() - used
        )));
    }
    match msg {
        Message::Tensor(f) => Ok(f),
        other => Err(WireError::Malformed(format!(
            "expected a TensorFrame, got {:?}",
            other.msg_type()
        ))),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Malformed("length overflow".into()))?;
        if end > self.buf.len() {
            return Err(WireError::Incomplete { needed: end });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_bits(self.u32()?))
    }
}

/// Decodes one message from the front of `buf`, returning it and the number
/// of bytes consumed. `Incomplete` reports the minimum total length needed to
/// make progress, which never exceeds the true message length.
///
/// Structure is parsed first, then the CRC is verified, then semantic checks
/// (payload/shape consistency) run on the authenticated body.
pub fn decode_message(buf: &[u8]) -> Result<(Message, usize), WireError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let type_byte = c.u8()?;
    let ty = MsgType::from_wire(type_byte).ok_or(WireError::UnknownType(type_byte))?;

    let msg = match ty {
        MsgType::TensorFrame => {
            let frame_id = c.u32()?;
            let split_layer = c.u16()?;
            let codec_byte = c.u8()?;
            let codec = CodecId::from_wire(codec_byte).ok_or(WireError::UnknownCodec(codec_byte))?;
            let ndim = c.u8()? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(WireError::Malformed(format!("ndim {ndim} not in 1..={MAX_NDIM}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut elements = 1usize;
            for _ in 0..ndim {
                let d = c.u32()? as usize;
                elements = elements.saturating_mul(d);
                if d == 0 || elements > MAX_ELEMENTS {
                    return Err(WireError::Malformed(format!("bad dimension {d}")));
                }
                shape.push(d);
            }
            let bounds = if codec.is_quantized() {
                Some((c.f32()?, c.f32()?))
            } else {
                None
            };
            let payload_len = c.u32()? as usize;
            if payload_len > MAX_PAYLOAD {
                return Err(WireError::Malformed(format!("payload length {payload_len} too large")));
            }
            let payload = c.take(payload_len)?.to_vec();
            let frame = TensorFrame {
                frame_id,
                split_layer,
                codec,
                shape,
                quant: None,
                payload,
            };
            (Message::Tensor(frame), bounds)
        }
        MsgType::ResultFrame => {
            let frame_id = c.u32()?;
            let server_compute_us = c.u32()?;
            let k = c.u8()? as usize;
            if k > MAX_TOP_K {
                return Err(WireError::Malformed(format!("top-k count {k} exceeds {MAX_TOP_K}")));
            }
            let mut top_k = Vec::with_capacity(k);
            for _ in 0..k {
                top_k.push((c.u16()?, c.f32()?));
            }
            (Message::Result(ResultFrame {
                frame_id,
                server_compute_us,
                top_k,
            }), None)
        }
        MsgType::Hello | MsgType::HelloAck => {
            let h = Hello {
                protocol_version: c.u8()?,
                model_hash: c.u64()?,
            };
            let msg = if ty == MsgType::Hello {
                Message::Hello(h)
            } else {
                Message::HelloAck(h)
            };
            (msg, None)
        }
        MsgType::ConfigUpdate => {
            let split_layer = c.u16()?;
            let b = c.u8()?;
            let codec = CodecId::from_wire(b).ok_or(WireError::UnknownCodec(b))?;
            (Message::Config(ConfigUpdate { split_layer, codec }), None)
        }
        MsgType::Error => {
            let code = c.u8()?;
            let len = c.u16()? as usize;
            let message = String::from_utf8(c.take(len)?.to_vec())
                .map_err(|_| WireError::Malformed("error message is not UTF-8".into()))?;
            (Message::Error(ErrorMessage { code, message }), None)
        }
    };

    let body_end = c.pos;
    let stored = c.u32()?;
    let computed = crc32fast::hash(&buf[4..body_end]);
    if stored != computed {
        return Err(WireError::BadCrc { stored, computed });
    }

    let (mut msg, bounds) = msg;
    if let Message::Tensor(frame) = &mut msg {
        if let Some((lo, hi)) = bounds {
            frame.quant = Some(
                QuantParams::from_interval(lo, hi)
                    .map_err(|_| WireError::Malformed(format!("invalid quantization interval [{lo}, {hi}]")))?,
            );
        }
        check_frame_payload(frame)?;
    }
    if let Message::Result(r) = &msg {
        if r.top_k.windows(2).any(|w| !(w[0].1 >= w[1].1)) {
            return Err(WireError::Malformed("top-k scores are not descending".into()));
        }
    }
    Ok((msg, c.pos))
}

fn check_frame_payload(frame: &TensorFrame) -> Result<(), WireError> {
    let n = frame.elements();
    let ok = match frame.codec {
        CodecId::Float32Raw => frame.payload.len() == 4 * n,
        CodecId::U8Quant => frame.payload.len() == n,
        CodecId::U8QuantHuffman => {
            frame.payload.len() >= entropy::HEADER_LEN
                && u32::from_le_bytes(frame.payload[..4].try_into().expect("4 bytes")) as usize == n
        }
    };
    if ok {
        Ok(())
    } else {
        Err(WireError::Malformed(format!(
            "{} payload of {} bytes is inconsistent with shape {:?}",
            frame.codec,
            frame.payload.len(),
            frame.shape
        )))
    }
}

/// Reads exactly one message from a byte stream, never consuming bytes that
/// belong to the next message. Returns `Ok(None)` on a clean end of stream
/// at a message boundary.
pub fn read_message<R: Read>(reader: &mut R) -> Result<Option<(Message, Vec<u8>)>, WireError> {
    let mut buf: Vec<u8> = Vec::with_capacity(64);
    loop {
        match decode_message(&buf) {
            Ok((msg, used)) => {
                debug_assert_eq!(used, buf.len());
                return Ok(Some((msg, buf)));
            }
            Err(WireError::Incomplete { needed }) => {
                let start = buf.len();
                buf.resize(needed, 0);
                let mut filled = start;
                while filled < needed {
                    match reader.read(&mut buf[filled..]) {
                        Ok(0) if filled == 0 => return Ok(None),
                        Ok(0) => return Err(WireError::UnexpectedEof),
                        Ok(n) => filled += n,
                        Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                        Err(e) => return Err(WireError::Io(e.to_string())),
                    }
                }
            }
            Err(e) => return Err(e),
        }
    }
}
