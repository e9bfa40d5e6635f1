//! Request counters and the service-latency log.

use std::collections::VecDeque;

use nerc_core::bench::percentile;
use serde::{Deserialize, Serialize};

use crate::wire::FixStatus;

/// Latencies kept for the histogram; older entries are dropped.
pub const LATENCY_LOG_CAPACITY: usize = 1 << 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub ok: u64,
    pub warmup: u64,
    pub resets: u64,
    pub errors: u64,
    pub sessions: usize,
    pub latency: LatencySummary,
}

#[derive(Debug, Default)]
pub struct Metrics {
    requests: u64,
    ok: u64,
    warmup: u64,
    resets: u64,
    errors: u64,
    latencies: VecDeque<f64>,
}

impl Metrics {
    pub fn record(&mut self, status: FixStatus, latency_ms: f64) {
        self.requests += 1;
        match status {
            FixStatus::Ok => self.ok += 1,
            FixStatus::Warmup => self.warmup += 1,
            FixStatus::Reset => self.resets += 1,
            FixStatus::Error => self.errors += 1,
        }
        if self.latencies.len() == LATENCY_LOG_CAPACITY {
            self.latencies.pop_front();
        }
        self.latencies.push_back(latency_ms);
    }

    /// Raw latencies (ms) in arrival order.
    pub fn latency_log(&self) -> Vec<f64> {
        self.latencies.iter().copied().collect()
    }

    pub fn snapshot(&self, sessions: usize) -> MetricsSnapshot {
        let log = self.latency_log();
        let latency = if log.is_empty() {
            LatencySummary::default()
        } else {
            LatencySummary {
                count: log.len(),
                p50_ms: percentile(&log, 50.0).expect("non-empty"),
                p95_ms: percentile(&log, 95.0).expect("non-empty"),
                mean_ms: log.iter().sum::<f64>() / log.len() as f64,
            }
        };
        MetricsSnapshot {
            requests: self.requests,
            ok: self.ok,
            warmup: self.warmup,
            resets: self.resets,
            errors: self.errors,
            sessions,
            latency,
        }
    }
}
