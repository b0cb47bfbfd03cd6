//! Latency model and experiments: analytic prediction, rate sweeps over a
//! simulated (or real) link, crossover search, and the two-stage pipeline.
//!
//! All times are seconds (`f64`) unless a `Duration` is needed for the
//! virtual clock; rates are bytes per second, with 1 KB = 1000 bytes.
//!
//! Prediction for one frame:
//!
//! ```text
//! mobile_only: t_mobile_full
//! cloud_only:  rtt + input_bytes / rate + t_server_full
//! shared(k):   t_head(k) + rtt + upload_bytes(k, codec) / rate + t_tail(k)
//! ```
//!
//! The result frame is a few dozen bytes, so its transfer is folded into rtt.

use std::fmt;
use std::io::Write;
use std::net::ToSocketAddrs;
use std::str::FromStr;
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use log::debug;

use crate::codec::CodecId;
use crate::error::{Error, Result};
use crate::exec::{count_flops, eval_layer, forward};
use crate::graph::ModelGraph;
use crate::tensor::Tensor;
use crate::transport::client::{local_infer, prepare_frame, Split, TcpClient, DEFAULT_TIMEOUT};
use crate::transport::link::{LinkModel, KB};
use crate::transport::sim::{Compute, SimSession};
use crate::transport::wire::tensor_message_len;
use crate::zoo::SyntheticSource;

/// Client-only inference time of the reference deployment.
pub const REFERENCE_MOBILE_FULL_S: f64 = 0.160;
/// Server-only inference time of the reference deployment.
pub const REFERENCE_SERVER_FULL_S: f64 = 0.020;
pub const REFERENCE_RTT_S: f64 = 0.005;
/// Throughput assumed by the FLOP-proportional timing model.
pub const DEFAULT_DESK_FLOPS_PER_S: f64 = 1e9;
/// Relative tolerance of the crossover bisection.
pub const CROSSOVER_REL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    MobileOnly,
    CloudOnly,
    Shared(CodecId),
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::MobileOnly,
        Mode::CloudOnly,
        Mode::Shared(CodecId::Float32Raw),
        Mode::Shared(CodecId::U8Quant),
        Mode::Shared(CodecId::U8QuantHuffman),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::MobileOnly => "mobile_only",
            Mode::CloudOnly => "cloud_only",
            Mode::Shared(CodecId::Float32Raw) => "shared_f32",
            Mode::Shared(CodecId::U8Quant) => "shared_u8",
            Mode::Shared(CodecId::U8QuantHuffman) => "shared_u8h",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
            Error::InvalidArgument(format!("unknown mode '{s}' (valid: {})", valid.join(", ")))
        })
    }
}

/// Parses a comma-separated mode list; duplicates are rejected.
pub fn parse_modes(list: &str) -> Result<Vec<Mode>> {
    let mut modes = Vec::new();
    for item in list.split(',').map(str::trim) {
        let m: Mode = item.parse()?;
        if modes.contains(&m) {
            return Err(Error::InvalidArgument(format!("mode '{item}' listed twice")));
        }
        modes.push(m);
    }
    Ok(modes)
}

/// Parses `LO..HI:STEP` (KB/s) into the list of rates `LO, LO+STEP, ..., <= HI`.
pub fn parse_rate_range(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("rate range '{s}' is not LO..HI:STEP (KB/s)"));
    let (lo, rest) = s.trim().split_once("..").ok_or_else(bad)?;
    let (hi, step) = rest.split_once(':').ok_or_else(bad)?;
    let num = |t: &str| -> Result<f64> {
        let v: f64 = t.trim().parse().map_err(|_| bad())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad())
        }
    };
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(lo > 0.0) || hi < lo || !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rate range '{s}' needs 0 < LO <= HI and STEP > 0"
        )));
    }
    // The epsilon keeps HI itself when (HI-LO)/STEP is integral up to rounding.
    let n = ((hi - lo) / step + 1e-9).floor() + 1.0;
    if n > 1e6 {
        return Err(Error::InvalidArgument(format!("rate range '{s}' has too many points")));
    }
    Ok((0..n as usize).map(|i| lo + i as f64 * step).collect())
}

/// Reference constants and knobs read from a `key = value` text file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingConfig {
    pub t_mobile_full_s: f64,
    pub t_server_full_s: f64,
    pub rtt_s: f64,
    pub desk_flops_per_s: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            t_mobile_full_s: REFERENCE_MOBILE_FULL_S,
            t_server_full_s: REFERENCE_SERVER_FULL_S,
            rtt_s: REFERENCE_RTT_S,
            desk_flops_per_s: DEFAULT_DESK_FLOPS_PER_S,
        }
    }
}

impl TimingConfig {
    /// Keys: `t_mobile_full_ms`, `t_server_full_ms`, `rtt_ms`,
    /// `desk_flops_per_s`. Blank lines and `#` comments are ignored; keys not
    /// given keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::InvalidArgument(format!("timing config line {}: {msg}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let value: f64 = value.trim().parse().map_err(|_| err("value is not a number"))?;
            if !value.is_finite() || value < 0.0 {
                return Err(err("value must be finite and non-negative"));
            }
            match key.trim() {
                "t_mobile_full_ms" => cfg.t_mobile_full_s = value / 1e3,
                "t_server_full_ms" => cfg.t_server_full_s = value / 1e3,
                "rtt_ms" => cfg.rtt_s = value / 1e3,
                "desk_flops_per_s" if value > 0.0 => cfg.desk_flops_per_s = value,
                "desk_flops_per_s" => return Err(err("desk_flops_per_s must be positive")),
                other => return Err(err(&format!("unknown key '{other}'"))),
            }
        }
        Ok(cfg)
    }
}

/// Per-layer compute times plus the network and reference constants.
///
/// `t_head(k)` sums client times of layers `0..=k`; `t_tail(k)` sums server
/// times of layers `k+1..`. Upload sizes are whole wire messages.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingModel {
    pub client_layer_s: Vec<f64>,
    pub server_layer_s: Vec<f64>,
    /// `upload_bytes[k][codec as usize]`.
    pub upload_bytes: Vec<[f64; 3]>,
    pub rtt_s: f64,
    pub t_mobile_full_s: f64,
    pub t_server_full_s: f64,
    pub input_bytes: f64,
}

/// Wire size of a TensorFrame carrying the tensor at `split` with a
/// fixed-length codec. For `u8h` this returns the `u8` size plus the code
/// table, a bound rather than the actual (data-dependent) size.
pub fn nominal_upload_bytes(model: &ModelGraph, split: Split, codec: CodecId) -> usize {
    let (ndim, n) = match split {
        Split::Input => (model.input_shape().len(), model.input_elements()),
        Split::After(k) => (model.output_shape(k).len(), model.output_elements(k)),
    };
    let payload = match codec {
        CodecId::Float32Raw => 4 * n,
        CodecId::U8Quant => n,
        CodecId::U8QuantHuffman => n + crate::codec::entropy::HEADER_LEN,
    };
    tensor_message_len(ndim, codec, payload)
}

impl TimingModel {
    /// Builds a model from per-layer times with nominal upload sizes.
    pub fn from_layer_times(model: &ModelGraph, client: Vec<f64>, server: Vec<f64>, cfg: &TimingConfig) -> Result<Self> {
        let upload_bytes = (0..model.len())
            .map(|k| CodecId::ALL.map(|c| nominal_upload_bytes(model, Split::After(k), c) as f64))
            .collect();
        let t = Self {
            client_layer_s: client,
            server_layer_s: server,
            upload_bytes,
            rtt_s: cfg.rtt_s,
            t_mobile_full_s: cfg.t_mobile_full_s,
            t_server_full_s: cfg.t_server_full_s,
            input_bytes: nominal_upload_bytes(model, Split::Input, CodecId::Float32Raw) as f64,
        };
        t.validate()?;
        Ok(t)
    }

    /// Per-layer time proportional to FLOPs at `cfg.desk_flops_per_s`, the
    /// same on client and server. Fully deterministic.
    pub fn flop_proportional(model: &ModelGraph, cfg: &TimingConfig) -> Result<Self> {
        let times: Vec<f64> = count_flops(model)
            .iter()
            .map(|f| f.flops as f64 / cfg.desk_flops_per_s)
            .collect();
        Self::from_layer_times(model, times.clone(), times, cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.client_layer_s.len();
        if n == 0 || self.server_layer_s.len() != n || self.upload_bytes.len() != n {
            return Err(Error::InvalidArgument(
                "timing model needs equal-length, non-empty per-layer tables".into(),
            ));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let scalars = [self.rtt_s, self.t_mobile_full_s, self.t_server_full_s, self.input_bytes];
        if !self.client_layer_s.iter().chain(&self.server_layer_s).copied().all(ok)
            || !self.upload_bytes.iter().flatten().copied().all(ok)
            || !scalars.into_iter().all(ok)
        {
            return Err(Error::InvalidArgument(
                "timing model values must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.client_layer_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.client_layer_s.is_empty()
    }

    pub fn t_head(&self, k: usize) -> f64 {
        self.client_layer_s[..=k].iter().sum()
    }

    pub fn t_tail(&self, k: usize) -> f64 {
        self.server_layer_s[k + 1..].iter().sum()
    }

    pub fn upload(&self, k: usize, codec: CodecId) -> f64 {
        self.upload_bytes[k][codec as usize]
    }

    pub fn set_upload(&mut self, k: usize, codec: CodecId, bytes: f64) {
        self.upload_bytes[k][codec as usize] = bytes;
    }

    /// Replaces the upload sizes at `split` (and the cloud-only input size)
    /// with the mean wire size of `inputs` under each codec.
    pub fn measure_uploads(&mut self, model: &ModelGraph, split: usize, inputs: &[Tensor]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Empty("upload measurement inputs"));
        }
        for codec in CodecId::ALL {
            let mut total = 0usize;
            for x in inputs {
                total += prepare_frame(model, x, Split::After(split), codec, Default::default(), 0)?.bytes.len();
            }
            self.set_upload(split, codec, total as f64 / inputs.len() as f64);
        }
        let mut total = 0usize;
        for x in inputs {
            total += prepare_frame(model, x, Split::Input, CodecId::Float32Raw, Default::default(), 0)?.bytes.len();
        }
        self.input_bytes = total as f64 / inputs.len() as f64;
        Ok(())
    }
}

fn check_rate(rate_bps: f64) -> Result<()> {
    if rate_bps > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("rate must be positive, got {rate_bps}")))
    }
}

/// Predicted total time in seconds. `split` is ignored except for shared modes.
pub fn predict_total(mode: Mode, split: usize, timing: &TimingModel, rate_bps: f64) -> Result<f64> {
    check_rate(rate_bps)?;
    let net = |bytes: f64| timing.rtt_s + bytes / rate_bps;
    Ok(match mode {
        Mode::MobileOnly => timing.t_mobile_full_s,
        Mode::CloudOnly => net(timing.input_bytes) + timing.t_server_full_s,
        Mode::Shared(codec) => {
            if split >= timing.len() {
                return Err(Error::IndexOutOfRange {
                    index: split,
                    count: timing.len(),
                });
            }
            timing.t_head(split) + net(timing.upload(split, codec)) + timing.t_tail(split)
        }
    })
}

/// Smallest rate in `[lo, hi]` (bytes/s) at which `a` is no slower than `b`,
/// by bisection to relative tolerance [`CROSSOVER_REL_TOL`]. The difference
/// of two predictions is `c + d / rate`, monotone in rate, so the condition
/// holds on an interval touching one end of the range.
pub fn find_crossover(
    a: Mode,
    b: Mode,
    split: usize,
    timing: &TimingModel,
    lo: f64,
    hi: f64,
) -> Result<Option<f64>> {
    if !(lo > 0.0) || !hi.is_finite() || hi < lo {
        return Err(Error::InvalidArgument(format!("empty rate range {lo}..{hi}")));
    }
    let holds = |r: f64| -> Result<bool> {
        Ok(predict_total(a, split, timing, r)? <= predict_total(b, split, timing, r)?)
    };
    if holds(lo)? {
        return Ok(Some(lo));
    }
    if !holds(hi)? {
        return Ok(None);
    }
    let (mut bad, mut good) = (lo, hi);
    while good - bad > CROSSOVER_REL_TOL * good {
        let mid = 0.5 * (bad + good);
        if holds(mid)? {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(Some(good))
}

/// Median wall-clock time of each layer over `reps` passes of `inputs`.
pub fn measure_layer_times(model: &ModelGraph, inputs: &[Tensor], reps: usize) -> Result<Vec<f64>> {
    if inputs.is_empty() || reps == 0 {
        return Err(Error::Empty("timing inputs"));
    }
    // Validates every input once and warms caches.
    for x in inputs {
        forward(model, x)?;
    }
    let mut samples = vec![Vec::with_capacity(inputs.len() * reps); model.len()];
    for _ in 0..reps {
        for x in inputs {
            let mut acts: Vec<Tensor> = Vec::with_capacity(model.len());
            for (id, layer) in model.layers().iter().enumerate() {
                let ins: Vec<&Tensor> = if layer.inputs.is_empty() {
                    vec![x]
                } else {
                    layer.inputs.iter().map(|&i| &acts[i]).collect()
                };
                let t = Instant::now();
                let out = eval_layer(layer, &ins, model.output_shape(id));
                samples[id].push(t.elapsed().as_secs_f64());
                acts.push(out);
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|mut s| {
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub rates_kbps: Vec<f64>,
    pub modes: Vec<Mode>,
    /// Split used by the shared modes.
    pub split: usize,
    /// Frames per (rate, mode); the first is a discarded warm-up.
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rate_kbps: f64,
    pub mode: Mode,
    /// Layer name for shared modes, `input` for cloud-only, empty for mobile-only.
    pub split_layer: String,
    pub codec: Option<CodecId>,
    pub predicted_ms: f64,
    pub measured_ms: Option<f64>,
    pub upload_bytes: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "rate_kbps,mode,split_layer,codec,predicted_ms,measured_ms,upload_bytes";

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

impl SweepResult {
    pub fn rows_for(&self, mode: Mode) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SWEEP_CSV_HEADER.split(','))
            .map_err(|e| Error::Io(e.into()))?;
        for r in &self.rows {
            w.write_record([
                fmt_num(r.rate_kbps),
                r.mode.name().to_string(),
                r.split_layer.clone(),
                r.codec.map(|c| c.name().to_string()).unwrap_or_default(),
                format!("{:.3}", r.predicted_ms),
                r.measured_ms.map(|m| format!("{m:.3}")).unwrap_or_default(),
                fmt_num(r.upload_bytes),
            ])
            .map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }
}

fn secs(d: f64) -> Duration {
    Duration::from_secs_f64(d.max(0.0))
}

fn sweep_inputs(source: &SyntheticSource, frames: usize) -> Result<Vec<Tensor>> {
    if source.count == 0 {
        return Err(Error::Empty("input source"));
    }
    (0..frames).map(|i| source.sample(i % source.count).map(|(t, _)| t)).collect()
}

fn mode_split(mode: Mode, split: usize) -> (Split, CodecId) {
    match mode {
        Mode::Shared(codec) => (Split::After(split), codec),
        _ => (Split::Input, CodecId::Float32Raw),
    }
}

fn row_labels(model: &ModelGraph, mode: Mode, split: usize) -> (String, Option<CodecId>) {
    match mode {
        Mode::MobileOnly => (String::new(), None),
        Mode::CloudOnly => ("input".into(), Some(CodecId::Float32Raw)),
        Mode::Shared(c) => (model.layers()[split].name.clone(), Some(c)),
    }
}

fn check_sweep(model: &ModelGraph, config: &SweepConfig) -> Result<()> {
    if config.frames < 3 {
        return Err(Error::InvalidArgument(format!(
            "a sweep needs at least 3 frames (the first is warm-up), got {}",
            config.frames
        )));
    }
    if config.rates_kbps.is_empty() || config.modes.is_empty() {
        return Err(Error::Empty("sweep rates or modes"));
    }
    for &r in &config.rates_kbps {
        check_rate(r)?;
    }
    if !model.is_valid_split(config.split) {
        return Err(Error::InvalidSplit(config.split));
    }
    Ok(())
}

/// Runs every (rate, mode) pair through a simulated link with the timing
/// model's compute times injected, so measurements are deterministic.
///
/// Upload sizes in the prediction are replaced by the mean sizes of the
/// measured frames (frames `1..n`), which matters only for `u8h`.
pub fn run_sweep(
    model: &Arc<ModelGraph>,
    timing: &TimingModel,
    source: &SyntheticSource,
    config: &SweepConfig,
) -> Result<SweepResult> {
    check_sweep(model, config)?;
    timing.validate()?;
    let inputs = sweep_inputs(source, config.frames)?;
    let mut timing = timing.clone();
    timing.measure_uploads(model, config.split, &inputs[1..])?;

    let mut rows = Vec::with_capacity(config.rates_kbps.len() * config.modes.len());
    let mut sessions: Vec<Option<SimSession>> = Vec::new();
    for &mode in &config.modes {
        sessions.push(match mode {
            Mode::MobileOnly => {
                for x in &inputs {
                    local_infer(model, x)?;
                }
                None
            }
            _ => Some(SimSession::new(model.clone(), LinkModel::default())?),
        });
    }

    for &rate_kbps in &config.rates_kbps {
        let rate = rate_kbps * KB;
        let link = LinkModel::simulated(rate, secs(timing.rtt_s))?;
        for (&mode, session) in config.modes.iter().zip(sessions.iter_mut()) {
            let predicted = predict_total(mode, config.split, &timing, rate)?;
            let (split_layer, codec) = row_labels(model, mode, config.split);
            let (measured, bytes) = match session {
                None => (timing.t_mobile_full_s, 0.0),
                Some(sess) => {
                    sess.set_link(link);
                    let (split, codec) = mode_split(mode, config.split);
                    let compute = match mode {
                        Mode::CloudOnly => Compute::Fixed {
                            head: Duration::ZERO,
                            tail: secs(timing.t_server_full_s),
                        },
                        _ => Compute::Fixed {
                            head: secs(timing.t_head(config.split)),
                            tail: secs(timing.t_tail(config.split)),
                        },
                    };
                    let (mut total, mut bytes) = (0.0, 0usize);
                    for (i, x) in inputs.iter().enumerate() {
                        let out = sess.infer(x, split, codec, compute)?;
                        out.result()?;
                        if i > 0 {
                            total += out.total().as_secs_f64();
                            bytes += out.upload_bytes;
                        }
                    }
                    let n = (inputs.len() - 1) as f64;
                    (total / n, bytes as f64 / n)
                }
            };
            rows.push(SweepRow {
                rate_kbps,
                mode,
                split_layer,
                codec,
                predicted_ms: predicted * 1e3,
                measured_ms: Some(measured * 1e3),
                upload_bytes: bytes,
            });
        }
    }
    debug!("sweep produced {} rows", rows.len());
    Ok(SweepResult { rows })
}

/// Predictions only, without running any frames.
pub fn predict_sweep(model: &ModelGraph, timing: &TimingModel, config: &SweepConfig) -> Result<SweepResult> {
    let mut rows = Vec::new();
    for &rate_kbps in &config.rates_kbps {
        for &mode in &config.modes {
            let (split_layer, codec) = row_labels(model, mode, config.split);
            rows.push(SweepRow {
                rate_kbps,
                mode,
                split_layer,
                codec,
                predicted_ms: predict_total(mode, config.split, timing, rate_kbps * KB)? * 1e3,
                measured_ms: None,
                upload_bytes: match mode {
                    Mode::MobileOnly => 0.0,
                    Mode::CloudOnly => timing.input_bytes,
                    Mode::Shared(c) => timing.upload(config.split, c),
                },
            });
        }
    }
    Ok(SweepResult { rows })
}

/// Like [`run_sweep`] but over a real TCP connection with a throttled upload.
/// Measured times are wall-clock and include whatever the host adds; the
/// network delay is whatever the real path has.
pub fn run_sweep_tcp(
    addr: impl ToSocketAddrs + Clone,
    model: &Arc<ModelGraph>,
    timing: &TimingModel,
    source: &SyntheticSource,
    config: &SweepConfig,
) -> Result<SweepResult> {
    check_sweep(model, config)?;
    let inputs = sweep_inputs(source, config.frames)?;
    let mut timing = timing.clone();
    timing.measure_uploads(model, config.split, &inputs[1..])?;
    let mut client = TcpClient::connect(addr, model.clone(), f64::INFINITY, DEFAULT_TIMEOUT)?;
    let mut rows = Vec::new();
    for &rate_kbps in &config.rates_kbps {
        client.set_rate(rate_kbps * KB);
        for &mode in &config.modes {
            let (split_layer, codec) = row_labels(model, mode, config.split);
            let (mut total, mut bytes) = (0.0, 0usize);
            for (i, x) in inputs.iter().enumerate() {
                let t = Instant::now();
                let sent = match mode {
                    Mode::MobileOnly => {
                        local_infer(model, x)?;
                        0
                    }
                    _ => {
                        let (split, codec) = mode_split(mode, config.split);
                        client.infer(x, split, codec)?.upload_bytes
                    }
                };
                if i > 0 {
                    total += t.elapsed().as_secs_f64();
                    bytes += sent;
                }
            }
            let n = (inputs.len() - 1) as f64;
            rows.push(SweepRow {
                rate_kbps,
                mode,
                split_layer,
                codec,
                predicted_ms: predict_total(mode, config.split, &timing, rate_kbps * KB)? * 1e3,
                measured_ms: Some(total / n * 1e3),
                upload_bytes: bytes as f64 / n,
            });
        }
    }
    Ok(SweepResult { rows })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineReport {
    pub frames: usize,
    pub period_sequential_s: f64,
    pub period_pipelined_s: f64,
    /// `max(t_head, t_upload + rtt + t_tail)` from the mean stage times.
    pub predicted_period_s: f64,
}

impl PipelineReport {
    pub fn fps_sequential(&self) -> f64 {
        1.0 / self.period_sequential_s
    }

    pub fn fps_pipelined(&self) -> f64 {
        1.0 / self.period_pipelined_s
    }
}

/// Sequential versus two-stage pipelined execution on a simulated link.
///
/// In the pipeline the head of frame `i+1` starts as soon as frame `i` has
/// been handed to the link, and frame `i+1` is uploaded only after the result
/// of frame `i` arrived (one frame in flight):
///
/// ```text
/// send[i] = max(head_start[i] + t_head, result[i-1]);  head_start[i+1] = send[i]
/// ```
///
/// Periods are `(result[n-1] - result[0]) / (n - 1)`.
pub fn run_pipelined(
    model: &Arc<ModelGraph>,
    source: &SyntheticSource,
    link: LinkModel,
    split: Split,
    codec: CodecId,
    frames: usize,
    compute: Compute,
) -> Result<PipelineReport> {
    if frames < 10 {
        return Err(Error::InvalidArgument(format!(
            "the pipeline experiment needs at least 10 frames, got {frames}"
        )));
    }
    let inputs = sweep_inputs(source, frames)?;
    let period = |results: &[Duration]| {
        (results[results.len() - 1] - results[0]).as_secs_f64() / (results.len() - 1) as f64
    };

    let mut seq = SimSession::new(model.clone(), link)?;
    let mut seq_results = Vec::with_capacity(frames);
    for x in &inputs {
        let out = seq.infer(x, split, codec, compute)?;
        out.result()?;
        seq_results.push(out.result_at);
    }

    let mut pipe = SimSession::new(model.clone(), link)?;
    let mut pipe_results = Vec::with_capacity(frames);
    let (mut head_start, mut release) = (Duration::ZERO, Duration::ZERO);
    let (mut head, mut back) = (0.0, 0.0);
    for x in &inputs {
        let out = pipe.submit(head_start, release, x, split, codec, compute)?;
        out.result()?;
        head += out.t_head.as_secs_f64();
        back += (out.result_at - out.upload.start).as_secs_f64();
        head_start = out.upload.start;
        release = out.result_at;
        pipe_results.push(out.result_at);
    }
    let n = frames as f64;
    Ok(PipelineReport {
        frames,
        period_sequential_s: period(&seq_results),
        period_pipelined_s: period(&pipe_results),
        predicted_period_s: (head / n).max(back / n),
    })
}

/// The pipeline experiment against a real server: one thread computes heads
/// and uploads, the caller's thread collects results, and a permit channel
/// keeps at most one frame in flight.
pub fn run_pipelined_tcp(
    addr: impl ToSocketAddrs + Clone,
    model: &Arc<ModelGraph>,
    source: &SyntheticSource,
    rate_bps: f64,
    split: Split,
    codec: CodecId,
    frames: usize,
) -> Result<PipelineReport> {
    if frames < 10 {
        return Err(Error::InvalidArgument(format!(
            "the pipeline experiment needs at least 10 frames, got {frames}"
        )));
    }
    let inputs = sweep_inputs(source, frames)?;
    let period = |results: &[Instant]| {
        (results[results.len() - 1] - results[0]).as_secs_f64() / (results.len() - 1) as f64
    };

    let mut client = TcpClient::connect(addr.clone(), model.clone(), rate_bps, DEFAULT_TIMEOUT)?;
    let mut seq = Vec::with_capacity(frames);
    let (mut head, mut back) = (0.0, 0.0);
    for x in &inputs {
        let out = client.infer(x, split, codec)?;
        head += (out.timing.t_head + out.timing.t_encode).as_secs_f64();
        back += (out.timing.t_upload + out.timing.t_roundtrip_remainder).as_secs_f64();
        seq.push(Instant::now());
    }

    let client = TcpClient::connect(addr, model.clone(), rate_bps, DEFAULT_TIMEOUT)?;
    let (mut tx, mut rx) = client.into_split();
    let (permit_tx, permit_rx) = mpsc::channel::<()>();
    let sender = std::thread::spawn(move || -> Result<()> {
        for (i, x) in inputs.iter().enumerate() {
            let prepared = tx.prepare(x, split, codec)?;
            if i > 0 && permit_rx.recv().is_err() {
                return Ok(());
            }
            tx.send_prepared(&prepared)?;
        }
        Ok(())
    });
    let mut pipe = Vec::with_capacity(frames);
    for _ in 0..frames {
        let r = rx.recv();
        pipe.push(Instant::now());
        r?;
        let _ = permit_tx.send(());
    }
    sender
        .join()
        .map_err(|_| Error::Protocol("pipeline sender panicked".into()))??;
    let n = frames as f64;
    Ok(PipelineReport {
        frames,
        period_sequential_s: period(&seq),
        period_pipelined_s: period(&pipe),
        predicted_period_s: (head / n).max(back / n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer(head: f64, tail: f64, upload: f64) -> TimingModel {
        TimingModel {
            client_layer_s: vec![head, 0.0],
            server_layer_s: vec![0.0, tail],
            upload_bytes: vec![[upload; 3], [0.0; 3]],
            rtt_s: 0.005,
            t_mobile_full_s: 0.160,
            t_server_full_s: 0.020,
            input_bytes: 12_000.0,
        }
    }

    #[test]
    fn shared_prediction_adds_the_four_terms() {
        let t = two_layer(0.080, 0.010, 100.0 * KB);
        let ms = predict_total(Mode::Shared(CodecId::U8Quant), 0, &t, 1000.0 * KB).unwrap() * 1e3;
        assert!((ms - 195.0).abs() < 1e-9, "{ms}");
        let inf = predict_total(Mode::Shared(CodecId::U8Quant), 0, &t, f64::INFINITY).unwrap();
        assert!((inf - 0.095).abs() < 1e-12);
        assert!(predict_total(Mode::MobileOnly, 0, &t, 0.0).is_err());
    }

    #[test]
    fn crossover_solves_the_closed_form() {
        let t = two_layer(0.080, 0.010, 100.0 * KB);
        let r = find_crossover(Mode::Shared(CodecId::U8Quant), Mode::MobileOnly, 0, &t, 1.0, 1e7)
            .unwrap()
            .unwrap();
        let expect = 100.0 * KB / 0.065;
        assert!((r - expect).abs() <= expect * 2e-6, "{r} vs {expect}");
    }

    #[test]
    fn no_crossover_when_compute_alone_is_too_slow() {
        let t = two_layer(0.150, 0.010, 1.0);
        let r = find_crossover(Mode::Shared(CodecId::U8Quant), Mode::MobileOnly, 0, &t, 1.0, 1e9).unwrap();
        assert_eq!(r, None);
        assert!(find_crossover(Mode::CloudOnly, Mode::MobileOnly, 0, &t, 5.0, 1.0).is_err());
    }

    #[test]
    fn rate_range_grammar() {
        let r = parse_rate_range("50..3000:50").unwrap();
        assert_eq!(r.len(), 60);
        assert_eq!((r[0], r[59]), (50.0, 3000.0));
        assert_eq!(parse_rate_range("1..2:0.5").unwrap(), vec![1.0, 1.5, 2.0]);
        assert_eq!(parse_rate_range("10..10:5").unwrap(), vec![10.0]);
        for bad in ["", "50..3000", "50-3000:50", "0..10:1", "10..5:1", "1..2:0", "a..2:1", "1..inf:1"] {
            assert!(parse_rate_range(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn timing_config_keys() {
        let cfg = TimingConfig::parse("# reference\nrtt_ms = 10\n\nt_mobile_full_ms=200 # slow phone\n").unwrap();
        assert_eq!(cfg.rtt_s, 0.010);
        assert_eq!(cfg.t_mobile_full_s, 0.200);
        assert_eq!(cfg.t_server_full_s, REFERENCE_SERVER_FULL_S);
        assert!(TimingConfig::parse("rtt = 5").is_err());
        assert!(TimingConfig::parse("rtt_ms 5").is_err());
        assert!(TimingConfig::parse("rtt_ms = -1").is_err());
        assert!(TimingConfig::parse("desk_flops_per_s = 0").is_err());
    }

    #[test]
    fn modes_parse_by_name() {
        assert_eq!(parse_modes("mobile_only, shared_u8").unwrap(), vec![Mode::MobileOnly, Mode::Shared(CodecId::U8Quant)]);
        assert!(parse_modes("shared_f16").is_err());
        assert!(parse_modes("cloud_only,cloud_only").is_err());
    }
}
