use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{info, warn};
use splitwire::codec::CodecId;
use splitwire::image::{fit_image, read_pnm};
use splitwire::transport::{local_infer, Compute, LinkModel, SimSession, Split, TcpClient};
use splitwire::transport::wire::error_code;
use splitwire::zoo::SyntheticSource;
use splitwire::{Error, ModelGraph, Result, Tensor};

use crate::config::InputSource;

/// Frames fed to the session, cycled forever.
pub enum Inputs {
    Synthetic(SyntheticSource),
    Images(Vec<Tensor>),
}

impl Inputs {
    pub fn load(source: &InputSource, model: &ModelGraph) -> Result<Self> {
        match source {
            InputSource::Synthetic { seed, count } => {
                if *count == 0 {
                    return Err(Error::Empty("input source"));
                }
                Ok(Inputs::Synthetic(SyntheticSource::new(*seed, *count)))
            }
            InputSource::ImageDir { path } => load_dir(path, model.input_shape()).map(Inputs::Images),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Inputs::Synthetic(s) => s.count,
            Inputs::Images(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, n: u64) -> Result<Tensor> {
        let i = (n % self.len() as u64) as usize;
        match self {
            Inputs::Synthetic(s) => s.sample(i).map(|(x, _)| x),
            Inputs::Images(v) => Ok(v[i].clone()),
        }
    }
}

fn load_dir(dir: &Path, shape: &[usize]) -> Result<Vec<Tensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm")))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let img = read_pnm(&std::fs::read(&p)?).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
        out.push(fit_image(&img, shape)?);
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("no .pgm/.ppm images in {}", dir.display())));
    }
    Ok(out)
}

/// Timing of one completed frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameOutcome {
    pub t_head: Duration,
    pub t_upload: Duration,
    pub t_server: Duration,
    pub t_total: Duration,
    pub upload_bytes: usize,
    pub top1: (u16, f32),
}

fn top1(top_k: &[(u16, f32)]) -> Result<(u16, f32)> {
    top_k.first().copied().ok_or_else(|| Error::Protocol("empty result".into()))
}

/// Runs the whole model on the client.
pub fn run_local(model: &ModelGraph, x: &Tensor) -> Result<FrameOutcome> {
    let t0 = Instant::now();
    let top = local_infer(model, x)?;
    let t = t0.elapsed();
    Ok(FrameOutcome {
        t_head: t,
        t_upload: Duration::ZERO,
        t_server: Duration::ZERO,
        t_total: t,
        upload_bytes: 0,
        top1: top1(&top)?,
    })
}

pub struct TcpBackend {
    addr: SocketAddr,
    model: Arc<ModelGraph>,
    rate_bps: f64,
    timeout: Duration,
    client: Option<TcpClient>,
}

impl TcpBackend {
    pub fn connect(addr: SocketAddr, model: Arc<ModelGraph>, rate_bps: f64, timeout: Duration) -> Result<Self> {
        let client = TcpClient::connect(addr, model.clone(), rate_bps, timeout)?;
        info!("connected to {addr}");
        Ok(Self {
            addr,
            model,
            rate_bps,
            timeout,
            client: Some(client),
        })
    }
}

/// Where the remote half of a frame runs.
pub enum Backend {
    /// Server and link simulated in process on a virtual clock.
    Simulated(Box<SimSession>),
    Tcp(TcpBackend),
}

impl Backend {
    pub fn simulated(model: Arc<ModelGraph>, link: LinkModel) -> Result<Self> {
        Ok(Backend::Simulated(Box::new(SimSession::new(model, link)?)))
    }

    pub fn is_connected(&self) -> bool {
        match self {
            Backend::Simulated(_) => true,
            Backend::Tcp(t) => t.client.is_some(),
        }
    }

    pub fn remote(&mut self, x: &Tensor, split: Split, codec: CodecId) -> Result<FrameOutcome> {
        match self {
            Backend::Simulated(sim) => {
                let out = sim.infer(x, split, codec, Compute::Measured)?;
                let result = out.result()?;
                Ok(FrameOutcome {
                    t_head: out.t_head,
                    t_upload: out.t_upload(),
                    t_server: out.t_tail,
                    t_total: out.total(),
                    upload_bytes: out.upload_bytes,
                    top1: top1(&result.top_k)?,
                })
            }
            Backend::Tcp(tcp) => {
                let client = tcp
                    .client
                    .as_mut()
                    .ok_or_else(|| Error::Protocol("not connected".into()))?;
                match client.infer(x, split, codec) {
                    Ok(out) => Ok(FrameOutcome {
                        t_head: out.timing.t_head,
                        t_upload: out.timing.t_upload,
                        // On a shared host the server may start while the
                        // client is still descheduled inside the write; the
                        // overlap is already counted as upload time.
                        t_server: out.timing.t_server.min(out.timing.t_roundtrip_remainder),
                        t_total: out.timing.t_total,
                        upload_bytes: out.upload_bytes,
                        top1: top1(&out.top_k)?,
                    }),
                    Err(e) => {
                        if loses_connection(&e) {
                            warn!("connection to {} lost: {e}", tcp.addr);
                            tcp.client = None;
                        }
                        Err(e)
                    }
                }
            }
        }
    }

    /// Re-establishes a lost connection; a no-op when connected.
    pub fn reconnect(&mut self) -> Result<()> {
        match self {
            Backend::Simulated(_) => Ok(()),
            Backend::Tcp(tcp) => {
                if tcp.client.is_none() {
                    tcp.client = Some(TcpClient::connect(tcp.addr, tcp.model.clone(), tcp.rate_bps, tcp.timeout)?);
                    info!("reconnected to {}", tcp.addr);
                }
                Ok(())
            }
        }
    }
}

/// Errors after which the server has closed (or will close) the stream.
fn loses_connection(e: &Error) -> bool {
    match e {
        Error::Remote { code, .. } => !matches!(*code, error_code::INVALID_SPLIT | error_code::INFERENCE_FAILED),
        Error::Io(_) | Error::Timeout(_) | Error::Protocol(_) | Error::Wire(_) => true,
        _ => false,
    }
}
