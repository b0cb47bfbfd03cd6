//! Inference client: runs the head locally and ships the feature tensor.

use std::fmt;
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::codec::{encode_payload, CodecId, QuantMode};
use crate::error::{Error, Result};
use crate::exec::run_head;
use crate::graph::ModelGraph;
use crate::tensor::Tensor;
use crate::transport::link::ThrottledWriter;
use crate::transport::wire::{
    encode_message, read_message, Hello, Message, ResultFrame, TensorFrame, WireError, SPLIT_INPUT, VERSION,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// Where the model is cut. `Input` sends the raw input (cloud-only).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Input,
    After(usize),
}

impl Split {
    pub fn wire(self) -> u16 {
        match self {
            Split::Input => SPLIT_INPUT,
            Split::After(k) => k as u16,
        }
    }

    pub fn from_wire(v: u16) -> Self {
        if v == SPLIT_INPUT {
            Split::Input
        } else {
            Split::After(v as usize)
        }
    }

    /// Resolves a layer name; `input` selects the raw model input.
    pub fn parse(model: &ModelGraph, name: &str) -> Result<Self> {
        if name == "input" {
            return Ok(Split::Input);
        }
        let id = model.layer_id(name)?;
        if !model.is_valid_split(id) {
            return Err(Error::InvalidSplit(id));
        }
        Ok(Split::After(id))
    }

    pub fn name(self, model: &ModelGraph) -> String {
        match self {
            Split::Input => "input".into(),
            Split::After(k) => model.layers()[k].name.clone(),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Input => f.write_str("input"),
            Split::After(k) => write!(f, "{k}"),
        }
    }
}

/// Client-side work for one frame.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub frame: TensorFrame,
    pub bytes: Vec<u8>,
    pub t_head: Duration,
    pub t_encode: Duration,
}

/// Runs the head (if any), packs the cut tensor and encodes the message.
pub fn prepare_frame(
    model: &ModelGraph,
    input: &Tensor,
    split: Split,
    codec: CodecId,
    quant: QuantMode,
    frame_id: u32,
) -> Result<PreparedFrame> {
    let t0 = Instant::now();
    let cut = match split {
        Split::Input => {
            if input.shape() != model.input_shape() {
                return Err(Error::ShapeMismatch {
                    expected: model.input_shape().to_vec(),
                    actual: input.shape().to_vec(),
                });
            }
            input.clone()
        }
        Split::After(k) => run_head(model, input, k)?,
    };
    let t_head = t0.elapsed();
    let t1 = Instant::now();
    let (payload, q) = encode_payload(&cut, codec, quant)?;
    let frame = TensorFrame {
        frame_id,
        split_layer: split.wire(),
        codec,
        shape: cut.shape().to_vec(),
        quant: q,
        payload,
    };
    let bytes = encode_message(&Message::Tensor(frame.clone()));
    Ok(PreparedFrame {
        frame,
        bytes,
        t_head,
        t_encode: t1.elapsed(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub t_head: Duration,
    pub t_encode: Duration,
    pub t_upload: Duration,
    /// From the end of the upload to the arrival of the result.
    pub t_roundtrip_remainder: Duration,
    pub t_server: Duration,
    pub t_total: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutcome {
    pub frame_id: u32,
    pub top_k: Vec<(u16, f32)>,
    pub timing: Timing,
    pub upload_bytes: usize,
}

fn expect_result(msg: Message, frame_id: Option<u32>) -> Result<ResultFrame> {
    match msg {
        Message::Result(r) => {
            if let Some(id) = frame_id {
                if r.frame_id != id {
                    return Err(Error::Protocol(format!(
                        "result for frame {} while waiting for {id}",
                        r.frame_id
                    )));
                }
            }
            Ok(r)
        }
        Message::Error(e) => Err(Error::Remote {
            code: e.code,
            message: e.message,
        }),
        other => Err(Error::Protocol(format!("unexpected {:?} from server", other.msg_type()))),
    }
}

fn read_reply<R: Read>(reader: &mut R, timeout: Duration) -> Result<Message> {
    match read_message(reader) {
        Ok(Some((msg, _))) => Ok(msg),
        Ok(None) | Err(WireError::UnexpectedEof) => Err(Error::Protocol("server closed the connection".into())),
        Err(WireError::Io(e)) if e.contains("timed out") || e.contains("would block") => Err(Error::Timeout(timeout)),
        Err(e) => Err(e.into()),
    }
}

/// A connected session: Hello/HelloAck already exchanged.
pub struct Client<R: Read, W: Write> {
    reader: R,
    writer: W,
    model: Arc<ModelGraph>,
    next_frame_id: u32,
    quant: QuantMode,
    timeout: Duration,
}

pub type TcpClient = Client<TcpStream, ThrottledWriter<TcpStream>>;

impl TcpClient {
    /// Connects and handshakes. `rate_bps` throttles the upload direction;
    /// pass `f64::INFINITY` for an unthrottled link.
    pub fn connect(addr: impl ToSocketAddrs, model: Arc<ModelGraph>, rate_bps: f64, timeout: Duration) -> Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| Error::InvalidArgument("address resolves to nothing".into()))?;
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        let reader = stream.try_clone()?;
        let writer = ThrottledWriter::new(stream, rate_bps);
        Client::handshake(reader, writer, model, timeout)
    }

    pub fn set_rate(&mut self, rate_bps: f64) {
        self.writer.set_rate(rate_bps);
    }
}

impl<R: Read, W: Write> Client<R, W> {
    pub fn handshake(mut reader: R, mut writer: W, model: Arc<ModelGraph>, timeout: Duration) -> Result<Self> {
        let hello = Message::Hello(Hello {
            protocol_version: VERSION,
            model_hash: model.model_hash(),
        });
        writer.write_all(&encode_message(&hello))?;
        writer.flush()?;
        match read_reply(&mut reader, timeout)? {
            Message::HelloAck(ack) if ack.model_hash == model.model_hash() => {}
            Message::HelloAck(ack) => {
                return Err(Error::Protocol(format!("server acknowledged model {:016x}", ack.model_hash)))
            }
            Message::Error(e) => {
                return Err(Error::Remote {
                    code: e.code,
                    message: e.message,
                })
            }
            other => return Err(Error::Protocol(format!("unexpected {:?} during handshake", other.msg_type()))),
        }
        Ok(Self {
            reader,
            writer,
            model,
            next_frame_id: 1,
            quant: QuantMode::Empirical,
            timeout,
        })
    }

    pub fn set_quant_mode(&mut self, quant: QuantMode) {
        self.quant = quant;
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    /// Runs one frame end to end and waits for its result.
    pub fn infer(&mut self, input: &Tensor, split: Split, codec: CodecId) -> Result<InferOutcome> {
        let started = Instant::now();
        let frame_id = self.next_frame_id;
        self.next_frame_id = self.next_frame_id.wrapping_add(1);
        let prepared = prepare_frame(&self.model, input, split, codec, self.quant, frame_id)?;

        let t_send = Instant::now();
        self.writer.write_all(&prepared.bytes)?;
        self.writer.flush()?;
        let t_upload = t_send.elapsed();

        let t_wait = Instant::now();
        let msg = read_reply(&mut self.reader, self.timeout)?;
        let result = expect_result(msg, Some(frame_id))?;
        Ok(InferOutcome {
            frame_id,
            top_k: result.top_k,
            timing: Timing {
                t_head: prepared.t_head,
                t_encode: prepared.t_encode,
                t_upload,
                t_roundtrip_remainder: t_wait.elapsed(),
                t_server: Duration::from_micros(u64::from(result.server_compute_us)),
                t_total: started.elapsed(),
            },
            upload_bytes: prepared.bytes.len(),
        })
    }

    /// Splits the session into independently usable send and receive halves
    /// (one logical sender and one logical receiver).
    pub fn into_split(self) -> (ClientSender<W>, ClientReceiver<R>) {
        (
            ClientSender {
                writer: self.writer,
                model: self.model,
                next_frame_id: self.next_frame_id,
                quant: self.quant,
            },
            ClientReceiver {
                reader: self.reader,
                timeout: self.timeout,
            },
        )
    }
}

pub struct ClientSender<W: Write> {
    writer: W,
    model: Arc<ModelGraph>,
    next_frame_id: u32,
    quant: QuantMode,
}

impl<W: Write> ClientSender<W> {
    /// Runs the head and encodes the next frame without sending it.
    pub fn prepare(&mut self, input: &Tensor, split: Split, codec: CodecId) -> Result<PreparedFrame> {
        let frame_id = self.next_frame_id;
        self.next_frame_id = self.next_frame_id.wrapping_add(1);
        prepare_frame(&self.model, input, split, codec, self.quant, frame_id)
    }

    /// Uploads a prepared frame; returns once the last byte is written.
    pub fn send_prepared(&mut self, prepared: &PreparedFrame) -> Result<()> {
        self.writer.write_all(&prepared.bytes)?;
        self.writer.flush()?;
        Ok(())
    }

    /// Runs the head and uploads; returns the prepared frame (without waiting).
    pub fn send(&mut self, input: &Tensor, split: Split, codec: CodecId) -> Result<PreparedFrame> {
        let prepared = self.prepare(input, split, codec)?;
        self.send_prepared(&prepared)?;
        Ok(prepared)
    }
}

pub struct ClientReceiver<R: Read> {
    reader: R,
    timeout: Duration,
}

impl<R: Read> ClientReceiver<R> {
    pub fn recv(&mut self) -> Result<ResultFrame> {
        let msg = read_reply(&mut self.reader, self.timeout)?;
        expect_result(msg, None)
    }
}

/// Mobile-only inference: the full model on the client.
pub fn local_infer(model: &ModelGraph, input: &Tensor) -> Result<Vec<(u16, f32)>> {
    let out = crate::exec::infer(model, input)?;
    Ok(crate::transport::server::top_k(&out, crate::transport::server::TOP_K))
}
