#![allow(dead_code)]

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use splitwire::codec::CodecId;
use splitwire::transport::{LinkModel, KB};
use splitwire::zoo::{calibrated_microresnet, DEFAULT_CALIBRATION, REFERENCE_SEED};
use splitwire::ModelGraph;
use splitwire_session::{
    router, start_session, Backend, InputSource, LinkParams, SessionConfig, SessionHandle, SessionMode,
    SessionOptions,
};
use tower::ServiceExt;

pub const WAIT: Duration = Duration::from_secs(60);

pub fn model() -> Arc<ModelGraph> {
    static M: OnceLock<Arc<ModelGraph>> = OnceLock::new();
    M.get_or_init(|| Arc::new(calibrated_microresnet(REFERENCE_SEED, DEFAULT_CALIBRATION).unwrap()))
        .clone()
}

pub fn config(codec: CodecId) -> SessionConfig {
    SessionConfig {
        split_layer: "b1_relu".into(),
        codec,
        mode: SessionMode::Shared,
        source: InputSource::Synthetic { seed: 1, count: 16 },
        link: Some(LinkParams {
            rate_kbps: 500.0,
            rtt_ms: 5.0,
        }),
    }
}

pub fn simulated(cfg: SessionConfig, options: SessionOptions) -> SessionHandle {
    let link = LinkModel::simulated(500.0 * KB, Duration::from_millis(5)).unwrap();
    let backend = Backend::simulated(model(), link).unwrap();
    start_session(model(), backend, cfg, options).unwrap()
}

pub fn app(h: &SessionHandle) -> Router {
    router(h.shared(), None)
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, serde_json::Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null);
    (status, json)
}

pub fn ids(metrics: &serde_json::Value) -> Vec<u64> {
    metrics.as_array().unwrap().iter().map(|m| m["frame_id"].as_u64().unwrap()).collect()
}
