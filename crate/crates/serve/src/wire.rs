//! JSON messages of the `/fix` endpoint. Unknown request fields are ignored.

use nalgebra::Vector3;
use nerc_core::geo::EcefPosition;
use nerc_core::model::{Epoch, SatelliteObservation, SV};
use serde::{Deserialize, Serialize};

use crate::ServeError;

/// One satellite, with the columns of a trace file row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub prn: u8,
    pub sat_x: f64,
    pub sat_y: f64,
    pub sat_z: f64,
    pub sat_vx: f64,
    pub sat_vy: f64,
    pub sat_vz: f64,
    pub pseudorange_corrected: f64,
    pub prr: f64,
    pub cn0: f64,
    pub elevation_deg: f64,
    pub range_sigma: f64,
    pub rate_sigma: f64,
}

impl MeasurementRecord {
    pub fn from_observation(o: &SatelliteObservation) -> Self {
        Self {
            prn: o.prn,
            sat_x: o.sat_position.x(),
            sat_y: o.sat_position.y(),
            sat_z: o.sat_position.z(),
            sat_vx: o.sat_velocity.x,
            sat_vy: o.sat_velocity.y,
            sat_vz: o.sat_velocity.z,
            pseudorange_corrected: o.pseudorange,
            prr: o.pseudorange_rate,
            cn0: o.cn0,
            elevation_deg: o.elevation_deg,
            range_sigma: o.range_sigma,
            rate_sigma: o.rate_sigma,
        }
    }

    fn observation(&self) -> SatelliteObservation {
        SatelliteObservation {
            prn: self.prn,
            sat_position: EcefPosition::new(self.sat_x, self.sat_y, self.sat_z),
            sat_velocity: Vector3::new(self.sat_vx, self.sat_vy, self.sat_vz),
            pseudorange: self.pseudorange_corrected,
            pseudorange_rate: self.prr,
            cn0: self.cn0,
            elevation_deg: self.elevation_deg,
            range_sigma: self.range_sigma,
            rate_sigma: self.rate_sigma,
        }
    }

    fn values(&self) -> [f64; 12] {
        [
            self.sat_x,
            self.sat_y,
            self.sat_z,
            self.sat_vx,
            self.sat_vy,
            self.sat_vz,
            self.pseudorange_corrected,
            self.prr,
            self.cn0,
            self.elevation_deg,
            self.range_sigma,
            self.rate_sigma,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixRequest {
    pub session_id: String,
    pub utc_s: f64,
    pub measurements: Vec<MeasurementRecord>,
}

impl FixRequest {
    pub fn from_epoch(session_id: impl Into<String>, epoch: &Epoch) -> Self {
        Self {
            session_id: session_id.into(),
            utc_s: epoch.timestamp,
            measurements: epoch
                .observations
                .iter()
                .map(MeasurementRecord::from_observation)
                .collect(),
        }
    }

    /// Checks the payload and converts it to an epoch.
    pub fn to_epoch(&self) -> Result<Epoch, ServeError> {
        let bad = |m: String| Err(ServeError::Malformed(m));
        if self.session_id.is_empty() {
            return bad("empty session_id".into());
        }
        if !self.utc_s.is_finite() {
            return bad("utc_s is not finite".into());
        }
        if self.measurements.is_empty() {
            return bad("no measurements".into());
        }
        let mut seen = [false; SV];
        for m in &self.measurements {
            if !(1..=SV as u8).contains(&m.prn) {
                return bad(format!("prn {} outside 1..={SV}", m.prn));
            }
            if std::mem::replace(&mut seen[usize::from(m.prn) - 1], true) {
                return bad(format!("prn {} repeated", m.prn));
            }
            if m.values().iter().any(|v| !v.is_finite()) {
                return bad(format!("prn {}: non-finite value", m.prn));
            }
            if !(m.range_sigma > 0.0) || !(m.rate_sigma > 0.0) {
                return bad(format!("prn {}: sigmas must be positive", m.prn));
            }
        }
        Ok(Epoch {
            timestamp: self.utc_s,
            observations: self.measurements.iter().map(MeasurementRecord::observation).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FixStatus {
    /// Fewer than N+1 epochs cached; the fix comes from a partial horizon.
    Warmup,
    Ok,
    /// The gap rule fired; the cache holds only this epoch.
    Reset,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixResponse {
    pub utc_s: Option<f64>,
    pub lat_deg: Option<f64>,
    pub lon_deg: Option<f64>,
    pub alt_m: Option<f64>,
    pub status: FixStatus,
    pub latency_ms: f64,
    /// Cost-map potential at the fix (m), when the server holds a map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_cost_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FixResponse {
    pub fn error(utc_s: Option<f64>, msg: String, latency_ms: f64) -> Self {
        Self {
            utc_s,
            lat_deg: None,
            lon_deg: None,
            alt_m: None,
            status: FixStatus::Error,
            latency_ms,
            map_cost_m: None,
            error: Some(msg),
        }
    }
}
