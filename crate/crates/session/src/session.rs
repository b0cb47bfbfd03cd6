use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use serde::Serialize;
use splitwire::analyze::{profile_splits, LayerProfile, DEFAULT_PROFILE_FRAMES};
use splitwire::codec::CodecId;
use splitwire::transport::Split;
use splitwire::zoo::{SyntheticSource, REFERENCE_SEED};
use splitwire::{ModelGraph, Result};
use tokio::sync::broadcast;

use crate::backend::{run_local, Backend, FrameOutcome, Inputs};
use crate::error::SessionError;
use crate::config::{ConfigError, ConfigUpdate, SessionConfig, SessionMode};
use crate::metrics::{FrameMetric, MetricsRing, RING_CAPACITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnState {
    Connected,
    Reconnecting,
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Connection {
    pub state: ConnState,
    pub reconnect_attempts: u64,
    pub last_error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SessionOptions {
    /// Minimum time between the starts of consecutive frames.
    pub frame_interval: Duration,
    /// Stop after this many frames.
    pub max_frames: Option<u64>,
    pub ring_capacity: usize,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            frame_interval: Duration::ZERO,
            max_frames: None,
            ring_capacity: RING_CAPACITY,
            backoff_initial: Duration::from_millis(50),
            backoff_max: Duration::from_secs(2),
        }
    }
}

enum Command {
    Apply(SessionConfig),
    Stop,
}

/// State shared by the frame loop and the control API.
pub struct Shared {
    pub model: Arc<ModelGraph>,
    pub profiles: Vec<LayerProfile>,
    /// Latest accepted configuration.
    requested: Mutex<SessionConfig>,
    /// Configuration of the most recent frame boundary.
    active: Mutex<SessionConfig>,
    connection: Mutex<Connection>,
    last_frame_id: AtomicU64,
    failed_frames: AtomicU64,
    pub ring: MetricsRing,
    /// Dropped when the loop exits so open event streams end.
    events: Mutex<Option<broadcast::Sender<FrameMetric>>>,
    commands: Mutex<Sender<Command>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Status {
    pub config: SessionConfig,
    pub active_config: SessionConfig,
    pub connection: Connection,
    pub last_frame_id: u64,
    pub failed_frames: u64,
    pub model_hash: String,
}

impl Shared {
    pub fn status(&self) -> Status {
        Status {
            config: self.requested.lock().unwrap().clone(),
            active_config: self.active.lock().unwrap().clone(),
            connection: self.connection.lock().unwrap().clone(),
            last_frame_id: self.last_frame_id.load(Ordering::SeqCst),
            failed_frames: self.failed_frames.load(Ordering::SeqCst),
            model_hash: format!("{:016x}", self.model.model_hash()),
        }
    }

    /// Validates `update` and queues it for the next frame boundary.
    pub fn update(&self, update: &ConfigUpdate) -> std::result::Result<SessionConfig, ConfigError> {
        let mut requested = self.requested.lock().unwrap();
        let next = requested.updated(&self.model, update)?;
        *requested = next.clone();
        // Sent under the lock so the loop sees updates in acceptance order.
        let _ = self.commands.lock().unwrap().send(Command::Apply(next.clone()));
        Ok(next)
    }

    /// True once the frame loop has exited.
    pub fn is_stopped(&self) -> bool {
        self.connection.lock().unwrap().state == ConnState::Stopped
    }

    /// `None` once the frame loop has exited.
    pub fn subscribe(&self) -> Option<broadcast::Receiver<FrameMetric>> {
        self.events.lock().unwrap().as_ref().map(|tx| tx.subscribe())
    }

    /// Asks the frame loop to exit at the next frame boundary.
    pub fn request_stop(&self) {
        let _ = self.commands.lock().unwrap().send(Command::Stop);
    }

    fn set_connection(&self, f: impl FnOnce(&mut Connection)) {
        f(&mut self.connection.lock().unwrap());
    }
}

pub struct SessionHandle {
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl SessionHandle {
    pub fn shared(&self) -> Arc<Shared> {
        self.shared.clone()
    }

    /// Polls until `n` frames have completed or `timeout` elapses.
    pub fn wait_for_frames(&self, n: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.shared.last_frame_id.load(Ordering::SeqCst) < n {
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        true
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    pub fn stop(mut self) {
        self.stop_and_join();
    }

    /// Blocks until the frame loop exits on its own.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_and_join(&mut self) {
        self.shared.request_stop();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SessionHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Profiles the split points the control API advertises.
pub fn split_profiles(model: &ModelGraph) -> Result<Vec<LayerProfile>> {
    Ok(profile_splits(model, &SyntheticSource::new(REFERENCE_SEED, DEFAULT_PROFILE_FRAMES))?.profiles)
}

/// Validates `config` and starts the frame loop on its own thread.
pub fn start_session(
    model: Arc<ModelGraph>,
    backend: Backend,
    config: SessionConfig,
    options: SessionOptions,
) -> std::result::Result<SessionHandle, SessionError> {
    SessionConfig::check_split(&model, &config.split_layer)?;
    let inputs = Inputs::load(&config.source, &model)?;
    let profiles = split_profiles(&model)?;
    let (tx, rx) = mpsc::channel();
    let (events, _) = broadcast::channel(256);
    let shared = Arc::new(Shared {
        model,
        profiles,
        requested: Mutex::new(config.clone()),
        active: Mutex::new(config.clone()),
        connection: Mutex::new(Connection {
            state: if backend.is_connected() {
                ConnState::Connected
            } else {
                ConnState::Reconnecting
            },
            reconnect_attempts: 0,
            last_error: None,
        }),
        last_frame_id: AtomicU64::new(0),
        failed_frames: AtomicU64::new(0),
        ring: MetricsRing::new(options.ring_capacity),
        events: Mutex::new(Some(events)),
        commands: Mutex::new(tx),
    });
    let worker = FrameLoop {
        shared: shared.clone(),
        backend,
        inputs,
        config,
        options,
        commands: rx,
        next_input: 0,
    };
    let thread = std::thread::Builder::new()
        .name("frame-loop".into())
        .spawn(move || worker.run())?;
    Ok(SessionHandle {
        shared,
        thread: Some(thread),
    })
}

struct FrameLoop {
    shared: Arc<Shared>,
    backend: Backend,
    inputs: Inputs,
    config: SessionConfig,
    options: SessionOptions,
    commands: Receiver<Command>,
    next_input: u64,
}

enum Wake {
    Timeout,
    Stop,
}

impl FrameLoop {
    fn run(mut self) {
        let mut frame_id = 0u64;
        let mut reconnected = false;
        loop {
            if let Wake::Stop = self.drain() {
                break;
            }
            if self.options.max_frames.is_some_and(|m| frame_id >= m) {
                break;
            }
            if !self.backend.is_connected() {
                match self.recover() {
                    Some(()) => reconnected = true,
                    None => break,
                }
                continue;
            }
            let started = Instant::now();
            match self.frame() {
                Ok(out) => {
                    frame_id += 1;
                    let metric = self.metric(frame_id, &out, reconnected);
                    reconnected = false;
                    self.shared.ring.push(metric.clone());
                    self.shared.last_frame_id.store(frame_id, Ordering::SeqCst);
                    if let Some(tx) = self.shared.events.lock().unwrap().as_ref() {
                        let _ = tx.send(metric);
                    }
                    self.next_input += 1;
                }
                Err(e) => {
                    warn!("frame failed: {e}");
                    self.shared.failed_frames.fetch_add(1, Ordering::SeqCst);
                    self.shared.set_connection(|c| c.last_error = Some(e.to_string()));
                    if !self.backend.is_connected() {
                        self.shared.set_connection(|c| c.state = ConnState::Reconnecting);
                        continue;
                    }
                    // Skip the input that failed rather than retrying it forever.
                    self.next_input += 1;
                }
            }
            if let Some(rest) = self.options.frame_interval.checked_sub(started.elapsed()) {
                if let Wake::Stop = self.wait(rest) {
                    break;
                }
            }
        }
        self.shared.events.lock().unwrap().take();
        self.shared.set_connection(|c| c.state = ConnState::Stopped);
        debug!("frame loop stopped after {frame_id} frames");
    }

    /// Applies queued config changes; only called between frames.
    fn drain(&mut self) -> Wake {
        loop {
            match self.commands.try_recv() {
                Ok(Command::Apply(cfg)) => self.apply(cfg),
                Ok(Command::Stop) | Err(mpsc::TryRecvError::Disconnected) => return Wake::Stop,
                Err(mpsc::TryRecvError::Empty) => return Wake::Timeout,
            }
        }
    }

    /// Sleeps for `d` while still accepting commands.
    fn wait(&mut self, d: Duration) -> Wake {
        let deadline = Instant::now() + d;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.commands.recv_timeout(left) {
                Ok(Command::Apply(cfg)) => self.apply(cfg),
                Ok(Command::Stop) | Err(RecvTimeoutError::Disconnected) => return Wake::Stop,
                Err(RecvTimeoutError::Timeout) => return Wake::Timeout,
            }
        }
    }

    fn apply(&mut self, cfg: SessionConfig) {
        debug!("config -> {} {} {}", cfg.mode, cfg.split_layer, cfg.codec);
        self.config = cfg.clone();
        *self.shared.active.lock().unwrap() = cfg;
    }

    /// Retries the connection with exponential backoff. `None` on stop.
    fn recover(&mut self) -> Option<()> {
        let mut backoff = self.options.backoff_initial;
        loop {
            self.shared.set_connection(|c| {
                c.state = ConnState::Reconnecting;
                c.reconnect_attempts += 1;
            });
            match self.backend.reconnect() {
                Ok(()) => {
                    self.shared.set_connection(|c| c.state = ConnState::Connected);
                    return Some(());
                }
                Err(e) => {
                    debug!("reconnect failed: {e}");
                    self.shared.set_connection(|c| c.last_error = Some(e.to_string()));
                }
            }
            if let Wake::Stop = self.wait(backoff) {
                return None;
            }
            backoff = (backoff * 2).min(self.options.backoff_max);
        }
    }

    fn frame(&mut self) -> Result<FrameOutcome> {
        let x = self.inputs.get(self.next_input)?;
        let model = self.shared.model.clone();
        match self.config.mode {
            SessionMode::MobileOnly => run_local(&model, &x),
            SessionMode::CloudOnly => self.backend.remote(&x, Split::Input, CodecId::Float32Raw),
            SessionMode::Shared => {
                let split = Split::parse(&model, &self.config.split_layer)?;
                self.backend.remote(&x, split, self.config.codec)
            }
        }
    }

    fn metric(&self, frame_id: u64, out: &FrameOutcome, reconnected: bool) -> FrameMetric {
        let (split_layer, codec) = match self.config.mode {
            SessionMode::MobileOnly => (None, None),
            SessionMode::CloudOnly => (Some("input".into()), Some(CodecId::Float32Raw.name().into())),
            SessionMode::Shared => (Some(self.config.split_layer.clone()), Some(self.config.codec.name().into())),
        };
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        FrameMetric {
            frame_id,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            mode: self.config.mode,
            split_layer,
            codec,
            t_head_ms: ms(out.t_head),
            t_upload_ms: ms(out.t_upload),
            t_server_ms: ms(out.t_server),
            t_total_ms: ms(out.t_total),
            upload_bytes: out.upload_bytes,
            top1_class: out.top1.0,
            top1_score: out.top1.1,
            reconnected,
        }
    }
}
