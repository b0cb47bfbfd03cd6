//! Inference server: completes the forward pass for received feature tensors.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::codec::decode_payload;
use crate::error::Result;
use crate::exec::{forward_range, infer};
use crate::graph::ModelGraph;
use crate::tensor::Tensor;
use crate::transport::wire::{
    encode_message, error_code, read_message, Hello, Message, ResultFrame, TensorFrame, WireError,
    SPLIT_INPUT, VERSION,
};

pub const TOP_K: usize = 5;

/// What the connection should do after handling one input.
#[derive(Debug, Default, PartialEq)]
pub struct Response {
    pub replies: Vec<Message>,
    pub close: bool,
}

impl Response {
    fn reply(msg: Message) -> Self {
        Self {
            replies: vec![msg],
            close: false,
        }
    }

    fn fatal(code: u8, text: impl Into<String>) -> Self {
        Self {
            replies: vec![Message::error(code, text)],
            close: true,
        }
    }
}

/// Per-connection protocol state machine, independent of the byte transport
/// so the TCP server and the simulated link share it.
pub struct ServerSession {
    model: Arc<ModelGraph>,
    greeted: bool,
}

impl ServerSession {
    pub fn new(model: Arc<ModelGraph>) -> Self {
        Self {
            model,
            greeted: false,
        }
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    /// Handles one decoded message (or a decode failure) from the client.
    pub fn on_input(&mut self, input: Result<Message, WireError>) -> Response {
        match input {
            Ok(msg) => self.on_message(msg),
            Err(err) => self.on_decode_error(&err),
        }
    }

    pub fn on_decode_error(&mut self, err: &WireError) -> Response {
        let code = match err {
            WireError::UnsupportedVersion(_) => error_code::UNSUPPORTED_VERSION,
            WireError::UnknownType(_) => error_code::UNKNOWN_TYPE,
            _ => error_code::CORRUPT,
        };
        Response::fatal(code, err.to_string())
    }

    pub fn on_message(&mut self, msg: Message) -> Response {
        match msg {
            Message::Hello(h) => self.on_hello(h),
            _ if !self.greeted => Response::fatal(error_code::UNEXPECTED_MESSAGE, "expected Hello first"),
            Message::Tensor(frame) => match self.process_frame(&frame) {
                Ok((result, _)) => Response::reply(Message::Result(result)),
                Err(resp) => resp,
            },
            Message::Config(_) => Response::default(),
            other => Response::fatal(
                error_code::UNEXPECTED_MESSAGE,
                format!("unexpected {:?} from client", other.msg_type()),
            ),
        }
    }

    fn on_hello(&mut self, h: Hello) -> Response {
        if h.protocol_version != VERSION {
            return Response::fatal(
                error_code::UNSUPPORTED_VERSION,
                format!("protocol version {} unsupported", h.protocol_version),
            );
        }
        if h.model_hash != self.model.model_hash() {
            return Response::fatal(
                error_code::HASH_MISMATCH,
                format!(
                    "model hash {:016x} does not match server model {:016x}",
                    h.model_hash,
                    self.model.model_hash()
                ),
            );
        }
        self.greeted = true;
        Response::reply(Message::HelloAck(Hello {
            protocol_version: VERSION,
            model_hash: self.model.model_hash(),
        }))
    }

    /// Decodes the frame and runs the tail. Returns the result together with
    /// the final tensor; an error response leaves the connection open.
    pub fn process_frame(&self, frame: &TensorFrame) -> std::result::Result<(ResultFrame, Tensor), Response> {
        let started = Instant::now();
        let model = &self.model;
        let split = frame.split_layer;
        if split != SPLIT_INPUT && !model.is_valid_split(split as usize) {
            return Err(Response::reply(Message::error(
                error_code::INVALID_SPLIT,
                format!("invalid split point {split}; valid: {:?}", model.split_points()),
            )));
        }
        let fail = |e: crate::error::Error| {
            Response::reply(Message::error(error_code::INFERENCE_FAILED, e.to_string()))
        };
        let cut = decode_payload(&frame.payload, &frame.shape, frame.codec, frame.quant.as_ref()).map_err(fail)?;
        let out = if split == SPLIT_INPUT {
            infer(model, &cut)
        } else {
            forward_range(model, &cut, split as usize + 1, model.last_id())
        }
        .map_err(fail)?;
        let elapsed = started.elapsed().as_micros().min(u32::MAX as u128) as u32;
        Ok((
            ResultFrame {
                frame_id: frame.frame_id,
                server_compute_us: elapsed,
                top_k: top_k(&out, TOP_K),
            },
            out,
        ))
    }
}

/// Highest `k` scores, descending, ties broken by lower class id.
pub fn top_k(t: &Tensor, k: usize) -> Vec<(u16, f32)> {
    let mut idx: Vec<usize> = (0..t.len().min(u16::MAX as usize + 1)).collect();
    let d = t.data();
    idx.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i as u16, d[i])).collect()
}

/// Runs the protocol over any byte stream until the peer closes, a fatal
/// error occurs, or a write fails. Returns the number of messages written.
pub fn serve_stream<R: Read, W: Write>(model: Arc<ModelGraph>, reader: &mut R, writer: &mut W) -> usize {
    let mut session = ServerSession::new(model);
    let mut written = 0;
    loop {
        let input = match read_message(reader) {
            Ok(Some((msg, _))) => Ok(msg),
            Ok(None) => break,
            Err(WireError::UnexpectedEof) | Err(WireError::Io(_)) => break,
            Err(e) => Err(e),
        };
        let resp = session.on_input(input);
        for m in &resp.replies {
            if let Err(e) = writer.write_all(&encode_message(m)) {
                debug!("write failed: {e}");
                return written;
            }
            written += 1;
        }
        if resp.close {
            break;
        }
    }
    written
}

/// Serves one connection until the peer closes or a fatal error occurs.
pub fn handle_connection(model: Arc<ModelGraph>, stream: TcpStream) {
    let peer = stream.peer_addr().ok();
    let mut reader = match stream.try_clone() {
        Ok(s) => s,
        Err(e) => {
            warn!("cannot clone stream for {peer:?}: {e}");
            return;
        }
    };
    let mut writer = stream;
    let _ = writer.set_nodelay(true);
    serve_stream(model, &mut reader, &mut writer);
    let _ = writer.shutdown(Shutdown::Both);
    debug!("connection {peer:?} closed");
}

/// A running TCP inference server.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_and_join();
        }
    }
}

/// Binds `addr` and serves each connection on its own thread.
pub fn serve(model: Arc<ModelGraph>, addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    info!("serving model {:016x} on {local}", model.model_hash());
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let model = model.clone();
                    std::thread::spawn(move || handle_connection(model, stream));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    });
    Ok(ServerHandle {
        addr: local,
        stop,
        thread: Some(thread),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_breaks_ties() {
        let t = Tensor::new(vec![4], vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(top_k(&t, 3), vec![(1, 0.4), (2, 0.4), (0, 0.1)]);
    }
}
