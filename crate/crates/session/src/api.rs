//! Control API: `GET /status`, `GET /splits`, `POST /config`,
//! `GET /metrics?since=<id>` and the `GET /events` SSE stream.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use splitwire::analyze::LayerProfile;
use tokio::sync::broadcast::error::RecvError;
use tower_http::services::ServeDir;

use crate::config::{ConfigError, ConfigUpdate};
use crate::metrics::FrameMetric;
use crate::session::Shared;

/// One split point as listed by `GET /splits`; field names follow the
/// analyzer CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub layer_id: usize,
    pub layer_name: String,
    pub cum_flops: u64,
    pub bytes_f32: usize,
    pub bytes_u8: usize,
    pub entropy_bits: f64,
    pub est_bytes: f64,
    pub stability: f64,
}

impl From<&LayerProfile> for SplitSummary {
    fn from(p: &LayerProfile) -> Self {
        Self {
            layer_id: p.layer_id,
            layer_name: p.name.clone(),
            cum_flops: p.cumulative_flops,
            bytes_f32: p.output_bytes_f32,
            bytes_u8: p.output_bytes_u8,
            entropy_bits: p.entropy_bits,
            est_bytes: p.est_compressed_bytes,
            stability: p.stability,
        }
    }
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    since: Option<u64>,
}

/// Builds the router; `static_dir`, if given, is served for unmatched paths.
pub fn router(shared: Arc<Shared>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/status", get(status))
        .route("/splits", get(splits))
        .route("/config", post(config))
        .route("/metrics", get(metrics))
        .route("/events", get(events))
        .with_state(shared);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn status(State(s): State<Arc<Shared>>) -> impl IntoResponse {
    Json(s.status())
}

async fn splits(State(s): State<Arc<Shared>>) -> impl IntoResponse {
    Json(s.profiles.iter().map(SplitSummary::from).collect::<Vec<_>>())
}

fn bad_request(err: ConfigError) -> Response {
    (StatusCode::BAD_REQUEST, Json(err)).into_response()
}

async fn config(State(s): State<Arc<Shared>>, body: Bytes) -> Response {
    let update: ConfigUpdate = match serde_json::from_slice(&body) {
        Ok(u) => u,
        Err(e) => {
            return bad_request(ConfigError {
                error: format!("invalid body: {e}"),
                field: "body".into(),
                valid: ["split_layer", "codec", "mode"].map(String::from).to_vec(),
            })
        }
    };
    match s.update(&update) {
        Ok(cfg) => Json(cfg).into_response(),
        Err(e) => bad_request(e),
    }
}

async fn metrics(State(s): State<Arc<Shared>>, Query(q): Query<MetricsQuery>) -> impl IntoResponse {
    Json(s.ring.since(q.since.unwrap_or(0)))
}

fn metric_event(m: &FrameMetric) -> Event {
    Event::default()
        .event("metric")
        .id(m.frame_id.to_string())
        .json_data(m)
        .expect("metrics serialize")
}

/// Live metrics. A `Last-Event-ID` header first replays the buffered frames
/// after that id. The stream ends when the session stops.
async fn events(State(s): State<Arc<Shared>>, headers: HeaderMap) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    // Subscribe before the snapshot so no frame falls between the two.
    let rx = s.subscribe();
    let since = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let backlog: VecDeque<FrameMetric> = since.map(|id| s.ring.since(id).into()).unwrap_or_default();
    let last = backlog.back().map(|m| m.frame_id).or(since).unwrap_or(0);
    let stream = futures::stream::unfold((backlog, rx, last), |(mut backlog, mut rx, mut last)| async move {
        if let Some(m) = backlog.pop_front() {
            return Some((Ok(metric_event(&m)), (backlog, rx, last)));
        }
        let live = rx.as_mut()?;
        loop {
            match live.recv().await {
                Ok(m) if m.frame_id <= last => continue,
                Ok(m) => {
                    last = m.frame_id;
                    return Some((Ok(metric_event(&m)), (backlog, rx, last)));
                }
                Err(RecvError::Lagged(n)) => {
                    let ev = Event::default().event("lagged").data(n.to_string());
                    return Some((Ok(ev), (backlog, rx, last)));
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
