//! Trace and label files, horizontal metrics, evaluation reports and
//! horizon profiling.

mod io;
mod profile;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{
    emit_labels, emit_trace, ingest, ingest_labels, ingest_trace, join_labels, labels_from_sim,
    read_labels, read_trace, write_atomic, write_labels, write_trace, TrackPoint, LABEL_HEADER,
    TRACE_HEADER,
};
pub use profile::{profile_horizons, ProfileOptions, ProfileRow, PROFILE_HEADER};

use crate::edf::RoutePolyline;
use crate::estimate::{run_trace, EngineConfig, EstimateError};
use crate::geo::{ecef_to_lla, geodesic_distance, GeoError, GeodeticPosition};
use crate::model::{Epoch, StateVector};
use crate::neural::MlpParameters;
use crate::train::{predict_corrections, TrainError};

/// Nearest-neighbor timestamp tolerance for joining tracks, seconds.
pub const JOIN_TOLERANCE: f64 = 0.5;

/// Percentiles reported in every evaluation.
pub const REPORT_PERCENTILES: [f64; 5] = [50.0, 68.0, 90.0, 95.0, 99.0];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("epochs out of order at row {row}: {utc} after {previous}")]
    OutOfOrder { row: usize, utc: f64, previous: f64 },
    #[error("no label lies within {tolerance} s of any epoch")]
    Unjoinable { tolerance: f64 },
    #[error("tracks share no timestamps")]
    EmptyIntersection,
    #[error("no errors to summarize")]
    Empty,
    #[error("percentile must be within [0, 100], got {0}")]
    Percentile(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeoError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Percentile with linear interpolation between closest ranks: rank
/// `p/100·(n−1)` into the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, BenchError> {
    if values.is_empty() {
        return Err(BenchError::Empty);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(BenchError::Percentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted_percentile(&sorted, p))
}

fn sorted_percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean of the 50th and 95th percentiles.
pub fn horizontal_score(errors: &[f64]) -> Result<f64, BenchError> {
    if errors.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(0.5 * (sorted_percentile(&sorted, 50.0) + sorted_percentile(&sorted, 95.0)))
}

/// Geodesic horizontal distance between predicted and label points whose
/// timestamps match within [`JOIN_TOLERANCE`]. Both tracks must be
/// time-ordered.
pub fn horizontal_errors(pred: &[TrackPoint], label: &[TrackPoint]) -> Result<Vec<f64>, BenchError> {
    let mut out = Vec::new();
    let mut j = 0;
    for p in pred {
        while j + 1 < label.len() && (label[j + 1].utc_s - p.utc_s).abs() <= (label[j].utc_s - p.utc_s).abs() {
            j += 1;
        }
        let Some(l) = label.get(j) else { break };
        if (l.utc_s - p.utc_s).abs() <= JOIN_TOLERANCE {
            out.push(geodesic_distance(&p.geodetic(), &l.geodetic())?);
        }
    }
    if out.is_empty() {
        return Err(BenchError::EmptyIntersection);
    }
    Ok(out)
}

/// Distance (m) from each fix to the nearest point of `route`.
pub fn cross_track_errors(fixes: &[Option<StateVector>], route: &RoutePolyline) -> Vec<f64> {
    let proj = route.projection();
    fixes
        .iter()
        .flatten()
        .map(|x| {
            let g = ecef_to_lla(&x.ecef());
            route.distance_to(g.lat, g.lon, &proj)
        })
        .collect()
}

/// Estimator fixes as a track; epochs without a fix are dropped.
pub fn track_of(epochs: &[Epoch], fixes: &[Option<StateVector>]) -> Vec<TrackPoint> {
    epochs
        .iter()
        .zip(fixes)
        .filter_map(|(e, f)| {
            let g = ecef_to_lla(&f.as_ref()?.ecef());
            Some(TrackPoint {
                utc_s: e.timestamp,
                lat_deg: g.lat_deg(),
                lon_deg: g.lon_deg(),
                alt_m: Some(g.alt),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_seconds: f64,
    pub mean_epoch_ms: f64,
    pub fixes: usize,
    pub failures: usize,
    pub resets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub errors: Vec<f64>,
    /// `(percentile, meters)` pairs.
    pub percentiles: Vec<(f64, f64)>,
    pub score: f64,
    pub rmse: f64,
    pub engine: EngineConfig,
    pub runtime: RuntimeStats,
    /// Estimated track, one point per fixed epoch.
    #[serde(skip)]
    pub track: Vec<TrackPoint>,
}

impl EvalReport {
    pub fn from_errors(errors: Vec<f64>, engine: EngineConfig, runtime: RuntimeStats) -> Result<Self, BenchError> {
        let mut sorted = errors.clone();
        if sorted.is_empty() {
            return Err(BenchError::Empty);
        }
        sorted.sort_by(f64::total_cmp);
        let percentiles = REPORT_PERCENTILES
            .iter()
            .map(|&p| (p, sorted_percentile(&sorted, p)))
            .collect();
        Ok(Self {
            score: horizontal_score(&errors)?,
            rmse: (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt(),
            errors,
            percentiles,
            engine,
            runtime,
            track: Vec::new(),
        })
    }
}

/// Runs `engine` over `epochs` (network corrections when `params` is
/// given) and scores the fixes against `labels`.
pub fn evaluate_trace(
    epochs: &[Epoch],
    labels: &[TrackPoint],
    params: Option<&MlpParameters>,
    engine: &EngineConfig,
) -> Result<EvalReport, BenchError> {
    let started = Instant::now();
    let corrections = match params {
        Some(p) => predict_corrections(p, epochs)?,
        None => epochs.iter().map(|e| vec![0.0; e.visible_count()]).collect(),
    };
    let run = run_trace(epochs, &corrections, engine)?;
    let total_seconds = started.elapsed().as_secs_f64();
    let track = track_of(epochs, &run.fixes);
    let errors = horizontal_errors(&track, labels)?;
    let runtime = RuntimeStats {
        total_seconds,
        mean_epoch_ms: 1e3 * total_seconds / epochs.len().max(1) as f64,
        fixes: run.fix_count(),
        failures: run.failures.len(),
        resets: run.resets.len(),
    };
    let mut report = EvalReport::from_errors(errors, *engine, runtime)?;
    report.track = track;
    Ok(report)
}

impl TrackPoint {
    pub fn geodetic(&self) -> GeodeticPosition {
        GeodeticPosition::from_degrees(self.lat_deg, self.lon_deg, self.alt_m.unwrap_or(0.0))
    }
}
