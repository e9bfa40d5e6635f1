//! Inference service: clients post one epoch at a time and receive the
//! newest moving-horizon fix computed with network corrections.
//!
//! Routes: `POST /fix` with a [`FixRequest`] body, `GET /metrics`.

mod metrics;
mod session;
mod wire;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use nerc_core::edf::EdfCostMap;
use nerc_core::estimate::{EngineConfig, EngineKind, EstimateError};
use nerc_core::geo::ecef_to_lla;
use nerc_core::neural::{MlpParameters, NeuralError};
use thiserror::Error;

pub use metrics::{LatencySummary, Metrics, MetricsSnapshot, LATENCY_LOG_CAPACITY};
pub use session::ClientSession;
pub use wire::{FixRequest, FixResponse, FixStatus, MeasurementRecord};

/// Horizon used for serving.
pub const SERVE_HORIZON: usize = 5;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("timestamp {new} does not follow {last}")]
    NonMonotone { last: f64, new: f64 },
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServeError {
    fn http_status(&self) -> StatusCode {
        match self {
            Self::Malformed(_) | Self::NonMonotone { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

/// Arrival-cost MHE with N = 5.
pub fn serve_engine() -> EngineConfig {
    EngineConfig::with_kind(EngineKind::MheArrival, SERVE_HORIZON)
}

/// Shared server state. Each session is locked for the whole of a request,
/// so requests of one session run in arrival order while sessions proceed
/// independently.
#[derive(Debug)]
pub struct Service {
    engine: EngineConfig,
    model: Option<Arc<MlpParameters>>,
    map: Option<Arc<EdfCostMap>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<ClientSession>>>>,
    metrics: Mutex<Metrics>,
}

impl Service {
    pub fn new(engine: EngineConfig, model: Option<MlpParameters>, map: Option<EdfCostMap>) -> Self {
        Self {
            engine,
            model: model.map(Arc::new),
            map: map.map(Arc::new),
            sessions: Mutex::new(HashMap::new()),
            metrics: Mutex::new(Metrics::default()),
        }
    }

    pub fn engine(&self) -> &EngineConfig {
        &self.engine
    }

    pub fn session(&self, id: &str) -> Option<Arc<Mutex<ClientSession>>> {
        self.sessions.lock().expect("session table").get(id).cloned()
    }

    fn session_or_new(&self, id: &str) -> Arc<Mutex<ClientSession>> {
        self.sessions
            .lock()
            .expect("session table")
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(ClientSession::new(self.engine))))
            .clone()
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let sessions = self.sessions.lock().expect("session table").len();
        self.metrics.lock().expect("metrics").snapshot(sessions)
    }

    pub fn latency_log(&self) -> Vec<f64> {
        self.metrics.lock().expect("metrics").latency_log()
    }

    /// Parses and handles a raw request body.
    pub fn handle_bytes(&self, body: &[u8]) -> (StatusCode, FixResponse) {
        let started = Instant::now();
        match serde_json::from_slice::<FixRequest>(body) {
            Ok(req) => self.handle_timed(&req, started),
            Err(e) => self.finish_error(None, ServeError::Malformed(e.to_string()), started),
        }
    }

    pub fn handle(&self, req: &FixRequest) -> (StatusCode, FixResponse) {
        self.handle_timed(req, Instant::now())
    }

    fn handle_timed(&self, req: &FixRequest, started: Instant) -> (StatusCode, FixResponse) {
        let epoch = match req.to_epoch() {
            Ok(e) => e,
            Err(e) => return self.finish_error(Some(req.utc_s), e, started),
        };
        let session = self.session_or_new(&req.session_id);
        let result = session
            .lock()
            .expect("session lock")
            .step(epoch, self.model.as_deref());
        let fix = match result {
            Ok(f) => f,
            Err(e) => return self.finish_error(Some(req.utc_s), e, started),
        };
        let status = if fix.reset {
            FixStatus::Reset
        } else if fix.window_len < self.engine.horizon + 1 {
            FixStatus::Warmup
        } else {
            FixStatus::Ok
        };
        let g = ecef_to_lla(&fix.state.ecef());
        let map_cost_m = self.map.as_ref().map(|m| m.sample_cost(&g).0);
        let latency_ms = elapsed_ms(started);
        self.metrics.lock().expect("metrics").record(status, latency_ms);
        let resp = FixResponse {
            utc_s: Some(fix.timestamp),
            lat_deg: Some(g.lat_deg()),
            lon_deg: Some(g.lon_deg()),
            alt_m: Some(g.alt),
            status,
            latency_ms,
            map_cost_m,
            error: None,
        };
        (StatusCode::OK, resp)
    }

    fn finish_error(&self, utc_s: Option<f64>, e: ServeError, started: Instant) -> (StatusCode, FixResponse) {
        log::warn!("request rejected: {e}");
        let latency_ms = elapsed_ms(started);
        self.metrics.lock().expect("metrics").record(FixStatus::Error, latency_ms);
        (e.http_status(), FixResponse::error(utc_s, e.to_string(), latency_ms))
    }
}

fn elapsed_ms(started: Instant) -> f64 {
    started.elapsed().as_secs_f64() * 1e3
}

async fn post_fix(State(service): State<Arc<Service>>, body: Bytes) -> impl IntoResponse {
    let svc = service.clone();
    match tokio::task::spawn_blocking(move || svc.handle_bytes(&body)).await {
        Ok((code, resp)) => (code, Json(resp)),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(FixResponse::error(None, e.to_string(), 0.0)),
        ),
    }
}

async fn get_metrics(State(service): State<Arc<Service>>) -> Json<MetricsSnapshot> {
    Json(service.metrics())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/fix", post(post_fix))
        .route("/metrics", get(get_metrics))
        .with_state(service)
}

/// Serves until the process is stopped.
pub async fn run(addr: SocketAddr, service: Arc<Service>) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await?;
    Ok(())
}
