use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::SessionMode;

pub const RING_CAPACITY: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetric {
    pub frame_id: u64,
    /// Milliseconds since the Unix epoch when the frame finished.
    pub timestamp_ms: u64,
    pub mode: SessionMode,
    /// `None` for mobile-only frames, `"input"` for cloud-only.
    pub split_layer: Option<String>,
    pub codec: Option<String>,
    pub t_head_ms: f64,
    pub t_upload_ms: f64,
    pub t_server_ms: f64,
    pub t_total_ms: f64,
    pub upload_bytes: usize,
    pub top1_class: u16,
    pub top1_score: f32,
    /// First frame after the connection to the server was re-established.
    pub reconnected: bool,
}

/// Bounded FIFO of metrics ordered by frame id. The frame loop is the only
/// writer; readers copy out under a short lock.
pub struct MetricsRing {
    capacity: usize,
    inner: Mutex<VecDeque<FrameMetric>>,
}

impl MetricsRing {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            inner: Mutex::new(VecDeque::with_capacity(capacity)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `m`, evicting the oldest record when full. Ids must increase.
    pub fn push(&self, m: FrameMetric) {
        let mut q = self.inner.lock().unwrap();
        if let Some(last) = q.back() {
            assert!(m.frame_id > last.frame_id, "frame ids must increase");
        }
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(m);
    }

    /// Records with `frame_id > since`, oldest first.
    pub fn since(&self, since: u64) -> Vec<FrameMetric> {
        let q = self.inner.lock().unwrap();
        let start = q.partition_point(|m| m.frame_id <= since);
        q.range(start..).cloned().collect()
    }

    pub fn last(&self) -> Option<FrameMetric> {
        self.inner.lock().unwrap().back().cloned()
    }
}

impl Default for MetricsRing {
    fn default() -> Self {
        Self::new(RING_CAPACITY)
    }
}

#[cfg(test)]
pub(crate) fn metric(frame_id: u64) -> FrameMetric {
    FrameMetric {
        frame_id,
        timestamp_ms: 0,
        mode: SessionMode::MobileOnly,
        split_layer: None,
        codec: None,
        t_head_ms: 1.0,
        t_upload_ms: 0.0,
        t_server_ms: 0.0,
        t_total_ms: 1.0,
        upload_bytes: 0,
        top1_class: 0,
        top1_score: 1.0,
        reconnected: false,
    }
}
