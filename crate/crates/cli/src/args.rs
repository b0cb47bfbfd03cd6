use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Split DNN inference toolkit: cut a model between a client and a server,
/// compress the feature tensor on the wire, and measure the trade-off.
///
/// Rates are in KB/s with 1 KB = 1000 bytes. Set SPLITWIRE_LOG (e.g. `info`,
/// `debug`) for logging.
#[derive(Debug, Parser)]
#[command(name = "splitwire", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the seeded MicroResNet, calibrate its BatchNorms and save it.
    GenModel(GenModel),
    /// Profile every valid split point and write the analyzer CSV.
    Analyze(Analyze),
    /// Serve tail inference over TCP until interrupted.
    Serve(Serve),
    /// Run one split inference against a server and print the result.
    Infer(Infer),
    /// Sweep upload rates and modes; write predicted and measured latency.
    Sweep(Sweep),
    /// Compare sequential and pipelined frame rates (head of the next frame
    /// overlapping the upload and server work of the current one).
    Pipeline(Pipeline),
    /// Run a live session with the HTTP control API for the dashboard.
    Demo(Demo),
}

#[derive(Debug, Args)]
pub struct ModelArg {
    /// Model file written by `gen-model`.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenModel {
    /// Weight initialisation seed; also seeds the calibration frames.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Synthetic frames used to calibrate BatchNorm statistics (0 = none, else at least 16).
    #[arg(long, value_name = "N", default_value_t = 64)]
    pub calib: usize,
    /// Output path.
    #[arg(long, value_name = "FILE", default_value = "microresnet.cimf")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Analyze {
    #[command(flatten)]
    pub model: ModelArg,
    /// Synthetic calibration frames per split (at least 16).
    #[arg(long, value_name = "N", default_value_t = 16)]
    pub calib: usize,
    /// Seed of the calibration frames.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// CSV output path; standard output when omitted.
    #[arg(long, value_name = "CSV")]
    pub out: Option<PathBuf>,
    /// Also rank the splits for this upload rate (KB/s), using FLOP-proportional compute times.
    #[arg(long, value_name = "KBPS")]
    pub rate: Option<f64>,
    /// Timing constants file (`key = value`: t_mobile_full_ms, t_server_full_ms, rtt_ms, desk_flops_per_s).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[command(flatten)]
    pub model: ModelArg,
    /// Address to listen on.
    #[arg(long, value_name = "ADDR", default_value = "127.0.0.1:7878")]
    pub listen: SocketAddr,
}

#[derive(Debug, Args)]
pub struct Infer {
    #[command(flatten)]
    pub model: ModelArg,
    /// Server address.
    #[arg(long, value_name = "ADDR")]
    pub connect: SocketAddr,
    /// Layer after which the model is cut; `input` uploads the raw input.
    #[arg(long, value_name = "NAME")]
    pub split: String,
    /// Feature tensor codec: f32, u8 or u8h.
    #[arg(long, default_value = "u8")]
    pub codec: String,
    /// A binary PGM/PPM image, or `synth:IDX` for synthetic frame IDX (seed 42).
    #[arg(long, value_name = "FILE|synth:IDX", default_value = "synth:0")]
    pub input: String,
    /// Throttle the upload to this rate in KB/s; unthrottled when omitted.
    #[arg(long, value_name = "KBPS")]
    pub rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[command(flatten)]
    pub model: ModelArg,
    /// Upload rates as LO..HI:STEP in KB/s.
    #[arg(long, value_name = "LO..HI:STEP", default_value = "50..3000:50")]
    pub rates: String,
    /// Comma-separated modes: mobile_only, cloud_only, shared_f32, shared_u8, shared_u8h.
    #[arg(long, value_name = "LIST", default_value = "mobile_only,cloud_only,shared_f32,shared_u8")]
    pub modes: String,
    /// Split used by the shared modes.
    #[arg(long, value_name = "NAME", default_value = "b1_relu")]
    pub split: String,
    /// Frames per (rate, mode), including one discarded warm-up (at least 3).
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub frames: usize,
    /// Seed of the synthetic input frames.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Deterministic run: FLOP-proportional compute times on a simulated link.
    #[arg(long, conflicts_with = "connect")]
    pub simulate: bool,
    /// Only write predictions, run nothing.
    #[arg(long, conflicts_with = "connect")]
    pub predict_only: bool,
    /// Measure against a real server instead of the simulated link.
    #[arg(long, value_name = "ADDR")]
    pub connect: Option<SocketAddr>,
    /// Timing constants file (`key = value`: t_mobile_full_ms, t_server_full_ms, rtt_ms, desk_flops_per_s).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// CSV output path; standard output when omitted.
    #[arg(long, value_name = "CSV")]
    pub out: Option<PathBuf>,
    /// Also report the crossover rate of each mode against mobile_only.
    #[arg(long)]
    pub crossover: bool,
}

#[derive(Debug, Args)]
pub struct Pipeline {
    #[command(flatten)]
    pub model: ModelArg,
    /// Split layer.
    #[arg(long, value_name = "NAME", default_value = "b1_relu")]
    pub split: String,
    /// Codec: f32, u8 or u8h.
    #[arg(long, default_value = "u8")]
    pub codec: String,
    /// Frames to run (at least 10).
    #[arg(long, value_name = "N", default_value_t = 20)]
    pub frames: usize,
    /// Upload rate in KB/s.
    #[arg(long, value_name = "KBPS", default_value_t = 500.0)]
    pub rate: f64,
    /// Round-trip time of the simulated link in milliseconds.
    #[arg(long, value_name = "MS", default_value_t = 5.0)]
    pub rtt: f64,
    /// Seed of the synthetic input frames.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Measure against a real server; otherwise the link is simulated with
    /// FLOP-proportional compute times.
    #[arg(long, value_name = "ADDR")]
    pub connect: Option<SocketAddr>,
    /// Timing constants file (`key = value`: t_mobile_full_ms, t_server_full_ms, rtt_ms, desk_flops_per_s).
    #[arg(long, value_name = "FILE", conflicts_with = "connect")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Demo {
    #[command(flatten)]
    pub model: ModelArg,
    /// Server address; required unless --simulate.
    #[arg(long, value_name = "ADDR", required_unless_present = "simulate", conflicts_with = "simulate")]
    pub connect: Option<SocketAddr>,
    /// Run the server and link in process on a simulated link.
    #[arg(long)]
    pub simulate: bool,
    /// Address of the HTTP control API.
    #[arg(long, value_name = "ADDR", default_value = "127.0.0.1:8080")]
    pub control: SocketAddr,
    /// Initial split layer.
    #[arg(long, value_name = "NAME", default_value = "b1_relu")]
    pub split: String,
    /// Initial codec: f32, u8 or u8h.
    #[arg(long, default_value = "u8")]
    pub codec: String,
    /// Initial mode: mobile_only, cloud_only or shared.
    #[arg(long, default_value = "shared")]
    pub mode: String,
    /// Input frames: `synth:SEED:COUNT` or a directory of PGM/PPM images.
    #[arg(long, value_name = "SOURCE", default_value = "synth:42:256")]
    pub source: String,
    /// Upload rate in KB/s (throttles a real link; sets the simulated one).
    #[arg(long, value_name = "KBPS", default_value_t = 500.0)]
    pub rate: f64,
    /// Round-trip time of the simulated link in milliseconds.
    #[arg(long, value_name = "MS", default_value_t = 5.0)]
    pub rtt: f64,
    /// Minimum time between frame starts in milliseconds.
    #[arg(long, value_name = "MS", default_value_t = 100)]
    pub interval: u64,
    /// Stop after this many frames; runs until Ctrl-C when omitted.
    #[arg(long, value_name = "N")]
    pub frames: Option<u64>,
    /// Directory of static files (the dashboard) served by the control API.
    #[arg(long, value_name = "DIR")]
    pub static_dir: Option<PathBuf>,
}
