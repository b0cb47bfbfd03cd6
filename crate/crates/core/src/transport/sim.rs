//! Client and server joined by simulated links on one virtual clock.
//!
//! Every message is really encoded, parsed and executed; only time is
//! simulated. Compute durations are either measured on the host or injected
//! as constants, which makes runs exactly reproducible.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::codec::{CodecId, QuantMode};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::Tensor;
use crate::transport::client::{prepare_frame, Split};
use crate::transport::link::{Delivery, LinkModel, SimLink};
use crate::transport::server::ServerSession;
use crate::transport::wire::{decode_message, encode_message, ErrorMessage, Hello, Message, ResultFrame, VERSION};

/// Source of the compute durations charged to the virtual clock.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Compute {
    /// Wall-clock time actually spent on the host.
    Measured,
    /// Injected constants: head includes encoding, tail includes decoding.
    Fixed { head: Duration, tail: Duration },
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub frame_id: u32,
    pub head_start: Duration,
    pub upload: Delivery,
    pub server_start: Duration,
    pub server_done: Duration,
    pub result_at: Duration,
    pub t_head: Duration,
    pub t_tail: Duration,
    pub upload_bytes: usize,
    pub reply: std::result::Result<(ResultFrame, Tensor), ErrorMessage>,
}

impl SimOutcome {
    pub fn total(&self) -> Duration {
        self.result_at - self.head_start
    }

    /// Time the upload spent on the wire, excluding propagation.
    pub fn t_upload(&self) -> Duration {
        self.upload.sent - self.upload.start
    }

    pub fn result(&self) -> Result<&ResultFrame> {
        match &self.reply {
            Ok((r, _)) => Ok(r),
            Err(e) => Err(Error::Remote {
                code: e.code,
                message: e.message.clone(),
            }),
        }
    }

    pub fn output(&self) -> Option<&Tensor> {
        self.reply.as_ref().ok().map(|(_, t)| t)
    }
}

pub struct SimSession {
    model: Arc<ModelGraph>,
    server: ServerSession,
    up: SimLink,
    down: SimLink,
    clock: Duration,
    server_busy: Duration,
    next_frame_id: u32,
    quant: QuantMode,
}

fn downlink(link: LinkModel) -> LinkModel {
    LinkModel {
        rate_bps: f64::INFINITY,
        ..link
    }
}

impl SimSession {
    /// Creates the pair and performs the handshake (not charged to the clock).
    pub fn new(model: Arc<ModelGraph>, link: LinkModel) -> Result<Self> {
        let mut server = ServerSession::new(model.clone());
        let hello = encode_message(&Message::Hello(Hello {
            protocol_version: VERSION,
            model_hash: model.model_hash(),
        }));
        let (msg, _) = decode_message(&hello)?;
        let resp = server.on_message(msg);
        match resp.replies.first() {
            Some(Message::HelloAck(_)) => {}
            Some(Message::Error(e)) => {
                return Err(Error::Remote {
                    code: e.code,
                    message: e.message.clone(),
                })
            }
            _ => return Err(Error::Protocol("handshake failed".into())),
        }
        Ok(Self {
            model,
            server,
            up: SimLink::new(link),
            down: SimLink::new(downlink(link)),
            clock: Duration::ZERO,
            server_busy: Duration::ZERO,
            next_frame_id: 1,
            quant: QuantMode::Empirical,
        })
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn now(&self) -> Duration {
        self.clock
    }

    pub fn link(&self) -> &LinkModel {
        self.up.model()
    }

    pub fn set_link(&mut self, link: LinkModel) {
        self.up.set_model(link);
        self.down.set_model(downlink(link));
    }

    pub fn set_quant_mode(&mut self, quant: QuantMode) {
        self.quant = quant;
    }

    /// Runs one frame starting at the current clock and waits for its result.
    pub fn infer(&mut self, input: &Tensor, split: Split, codec: CodecId, compute: Compute) -> Result<SimOutcome> {
        let at = self.clock;
        let out = self.submit(at, Duration::ZERO, input, split, codec, compute)?;
        self.clock = self.clock.max(out.result_at);
        Ok(out)
    }

    /// Starts the head of a frame at `head_start` and follows it through the
    /// link and server. The upload is held until `release` if the head
    /// finishes earlier. The server handles frames strictly in order.
    pub fn submit(
        &mut self,
        head_start: Duration,
        release: Duration,
        input: &Tensor,
        split: Split,
        codec: CodecId,
        compute: Compute,
    ) -> Result<SimOutcome> {
        let frame_id = self.next_frame_id;
        self.next_frame_id = self.next_frame_id.wrapping_add(1);
        let prepared = prepare_frame(&self.model, input, split, codec, self.quant, frame_id)?;
        let t_head = match compute {
            Compute::Measured => prepared.t_head + prepared.t_encode,
            Compute::Fixed { head, .. } => head,
        };
        let upload = self.up.transmit((head_start + t_head).max(release), prepared.bytes.len());

        let server_start = upload.arrival.max(self.server_busy);
        let started = Instant::now();
        let (msg, _) = decode_message(&prepared.bytes)?;
        let Message::Tensor(frame) = msg else {
            return Err(Error::Protocol("client produced a non-tensor message".into()));
        };
        let processed = self.server.process_frame(&frame);
        let t_tail = match compute {
            Compute::Measured => started.elapsed(),
            Compute::Fixed { tail, .. } => tail,
        };
        let server_done = server_start + t_tail;
        self.server_busy = server_done;

        let (reply_msg, reply) = match processed {
            Ok((mut result, out)) => {
                result.server_compute_us = t_tail.as_micros().min(u32::MAX as u128) as u32;
                (Message::Result(result.clone()), Ok((result, out)))
            }
            Err(resp) => match resp.replies.into_iter().next() {
                Some(Message::Error(e)) => (Message::Error(e.clone()), Err(e)),
                _ => return Err(Error::Protocol("server produced no reply".into())),
            },
        };
        let down = self.down.transmit(server_done, encode_message(&reply_msg).len());
        Ok(SimOutcome {
            frame_id,
            head_start,
            upload,
            server_start,
            server_done,
            result_at: down.arrival,
            t_head,
            t_tail,
            upload_bytes: prepared.bytes.len(),
            reply,
        })
    }

    /// Moves the virtual clock forward (never backward).
    pub fn advance_to(&mut self, t: Duration) {
        self.clock = self.clock.max(t);
    }
}
