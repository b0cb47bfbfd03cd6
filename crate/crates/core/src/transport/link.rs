//! Bandwidth-limited links: a deterministic virtual-clock simulation and a
//! real-time throttled writer for sockets.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::io::{self, Write};
use std::rc::Rc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// 1 KB = 1000 bytes throughout the crate.
pub const KB: f64 = 1000.0;
pub const DEFAULT_RATE_BPS: f64 = 3_000.0 * KB;
pub const DEFAULT_RTT: Duration = Duration::from_millis(5);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkMode {
    Real,
    Simulated,
}

/// Upload link parameters. `rate_bps` is in bytes per second; an infinite
/// rate models an unthrottled link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkModel {
    pub rate_bps: f64,
    pub one_way_delay: Duration,
    pub mode: LinkMode,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            rate_bps: DEFAULT_RATE_BPS,
            one_way_delay: DEFAULT_RTT / 2,
            mode: LinkMode::Simulated,
        }
    }
}

impl LinkModel {
    pub fn new(rate_bps: f64, rtt: Duration, mode: LinkMode) -> Result<Self> {
        if !(rate_bps > 0.0) {
            return Err(Error::InvalidArgument(format!("link rate must be positive, got {rate_bps}")));
        }
        Ok(Self {
            rate_bps,
            one_way_delay: rtt / 2,
            mode,
        })
    }

    pub fn simulated(rate_bps: f64, rtt: Duration) -> Result<Self> {
        Self::new(rate_bps, rtt, LinkMode::Simulated)
    }

    pub fn rtt(&self) -> Duration {
        self.one_way_delay * 2
    }

    /// Serialization time of `bytes` at the link rate, rounded to the nanosecond.
    pub fn transfer_time(&self, bytes: usize) -> Duration {
        if self.rate_bps.is_infinite() {
            return Duration::ZERO;
        }
        Duration::from_nanos((bytes as f64 * 1e9 / self.rate_bps).round() as u64)
    }
}

/// Timing of one transmission on a simulated link.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Delivery {
    /// When the first byte entered the link (after any queued traffic).
    pub start: Duration,
    /// When the last byte left the sender.
    pub sent: Duration,
    /// When the last byte reached the receiver.
    pub arrival: Duration,
}

/// FIFO serializer on a virtual clock: a send begins when both the caller and
/// the link are ready, occupies the link for `bytes / rate`, and its last byte
/// arrives `one_way_delay` after it leaves. There is no burst credit, so every
/// send takes at least `bytes / rate`.
#[derive(Clone, Debug)]
pub struct SimLink {
    model: LinkModel,
    busy_until: Duration,
}

impl SimLink {
    pub fn new(model: LinkModel) -> Self {
        Self {
            model,
            busy_until: Duration::ZERO,
        }
    }

    pub fn model(&self) -> &LinkModel {
        &self.model
    }

    /// Changes the link parameters for subsequent sends; traffic already
    /// queued keeps its schedule.
    pub fn set_model(&mut self, model: LinkModel) {
        self.model = model;
    }

    pub fn transmit(&mut self, at: Duration, bytes: usize) -> Delivery {
        let start = at.max(self.busy_until);
        let sent = start + self.model.transfer_time(bytes);
        self.busy_until = sent;
        Delivery {
            start,
            sent,
            arrival: sent + self.model.one_way_delay,
        }
    }
}

struct Channel {
    link: SimLink,
    queue: VecDeque<(Duration, Vec<u8>)>,
}

/// Sending half of a simulated link.
pub struct LinkSender {
    chan: Rc<RefCell<Channel>>,
}

/// Receiving half of a simulated link.
pub struct LinkReceiver {
    chan: Rc<RefCell<Channel>>,
}

/// Creates a connected simulated endpoint pair. Both halves live on one
/// thread and share the caller's virtual clock.
pub fn throttled_link(model: LinkModel) -> (LinkSender, LinkReceiver) {
    let chan = Rc::new(RefCell::new(Channel {
        link: SimLink::new(model),
        queue: VecDeque::new(),
    }));
    (LinkSender { chan: chan.clone() }, LinkReceiver { chan })
}

impl LinkSender {
    pub fn send(&self, at: Duration, bytes: Vec<u8>) -> Delivery {
        let mut chan = self.chan.borrow_mut();
        let d = chan.link.transmit(at, bytes.len());
        chan.queue.push_back((d.arrival, bytes));
        d
    }
}

impl LinkReceiver {
    /// Arrival time of the next message, if any is in flight.
    pub fn next_arrival(&self) -> Option<Duration> {
        self.chan.borrow().queue.front().map(|(t, _)| *t)
    }

    /// Takes the next message if it has fully arrived by `now`.
    pub fn recv(&self, now: Duration) -> Option<(Duration, Vec<u8>)> {
        let mut chan = self.chan.borrow_mut();
        match chan.queue.front() {
            Some((t, _)) if *t <= now => chan.queue.pop_front(),
            _ => None,
        }
    }

    /// Takes the next message, advancing to its arrival time.
    pub fn recv_next(&self) -> Option<(Duration, Vec<u8>)> {
        self.chan.borrow_mut().queue.pop_front()
    }
}

/// Real-time token-bucket throttle for a byte sink.
///
/// Tokens accrue at `rate_bps` up to a capacity of one rate-second. The
/// bucket is emptied at the start of every message (after each `flush`), so
/// a message of `B` bytes never completes sooner than `B / rate` after its
/// first write.
pub struct ThrottledWriter<W: Write> {
    inner: W,
    rate_bps: f64,
    capacity: f64,
    tokens: f64,
    last_refill: Option<Instant>,
}

impl<W: Write> ThrottledWriter<W> {
    pub fn new(inner: W, rate_bps: f64) -> Self {
        Self {
            inner,
            rate_bps,
            capacity: rate_bps.max(1.0),
            tokens: 0.0,
            last_refill: None,
        }
    }

    pub fn get_ref(&self) -> &W {
        &self.inner
    }

    pub fn get_mut(&mut self) -> &mut W {
        &mut self.inner
    }

    pub fn set_rate(&mut self, rate_bps: f64) {
        self.rate_bps = rate_bps;
        self.capacity = rate_bps.max(1.0);
    }

    fn refill(&mut self) {
        let now = Instant::now();
        match self.last_refill {
            None => self.tokens = 0.0,
            Some(prev) => {
                let earned = now.duration_since(prev).as_secs_f64() * self.rate_bps;
                self.tokens = (self.tokens + earned).min(self.capacity);
            }
        }
        self.last_refill = Some(now);
    }
}

const MAX_CHUNK: usize = 16 * 1024;

impl<W: Write> Write for ThrottledWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() || self.rate_bps.is_infinite() {
            return self.inner.write(buf);
        }
        let chunk = buf.len().min(MAX_CHUNK).min(self.capacity as usize).max(1);
        self.refill();
        let deficit = chunk as f64 - self.tokens;
        if deficit > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(deficit / self.rate_bps));
            self.refill();
        }
        let n = self.inner.write(&buf[..chunk])?;
        self.tokens -= n as f64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.last_refill = None;
        self.inner.flush()
    }
}
