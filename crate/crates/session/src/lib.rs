//! Long-running split-inference session with a live HTTP control API.
//!
//! One thread runs frames back to back under the current [`SessionConfig`];
//! config changes posted to the API are queued and applied between frames.
//! Per-frame [`FrameMetric`]s go to a bounded ring buffer (`GET /metrics`)
//! and an SSE stream (`GET /events`).

pub mod api;
pub mod backend;
pub mod config;
pub mod error;
pub mod metrics;
pub mod session;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use log::info;
use splitwire::ModelGraph;

pub use api::{router, SplitSummary};
pub use backend::{Backend, Inputs, TcpBackend};
pub use config::{ConfigError, ConfigUpdate, InputSource, LinkParams, SessionConfig, SessionMode};
pub use error::SessionError;
pub use metrics::{FrameMetric, MetricsRing, RING_CAPACITY};
pub use session::{start_session, ConnState, SessionHandle, SessionOptions, Shared, Status};

/// Runs a session and serves its control API on `listener` until Ctrl-C or,
/// with `max_frames` set, until the frame loop finishes.
pub fn run_session(
    model: Arc<ModelGraph>,
    backend: Backend,
    config: SessionConfig,
    options: SessionOptions,
    listener: std::net::TcpListener,
    static_dir: Option<PathBuf>,
) -> Result<(), SessionError> {
    let handle = start_session(model, backend, config, options)?;
    let app = router(handle.shared(), static_dir);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    rt.block_on(async {
        listener.set_nonblocking(true)?;
        let listener = tokio::net::TcpListener::from_std(listener)?;
        info!("control API on http://{}", listener.local_addr()?);
        let shared = handle.shared();
        let done = async move {
            let finished = async {
                while !shared.is_stopped() {
                    tokio::time::sleep(Duration::from_millis(100)).await;
                }
            };
            tokio::select! {
                _ = tokio::signal::ctrl_c() => info!("interrupted"),
                _ = finished => info!("frame loop finished"),
            }
            // Stopping the loop also ends the event streams, which would
            // otherwise hold the graceful shutdown open.
            shared.request_stop();
            while !shared.is_stopped() {
                tokio::time::sleep(Duration::from_millis(10)).await;
            }
        };
        axum::serve(listener, app).with_graceful_shutdown(done).await
    })?;
    handle.stop();
    Ok(())
}
