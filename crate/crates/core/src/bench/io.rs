use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{BenchError, JOIN_TOLERANCE};
use crate::geo::{lla_to_ecef, EcefPosition, GeodeticPosition};
use crate::model::{Epoch, SatelliteObservation, SV};
use crate::sim::Trace;
use crate::train::Label;

pub const TRACE_HEADER: [&str; 14] = [
    "utc_s",
    "prn",
    "sat_x",
    "sat_y",
    "sat_z",
    "sat_vx",
    "sat_vy",
    "sat_vz",
    "pseudorange_corrected",
    "prr",
    "cn0",
    "elevation_deg",
    "range_sigma",
    "rate_sigma",
];

/// Required label columns; `alt_m` may follow.
pub const LABEL_HEADER: [&str; 3] = ["utc_s", "lat_deg", "lon_deg"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    utc_s: f64,
    prn: u8,
    sat_x: f64,
    sat_y: f64,
    sat_z: f64,
    sat_vx: f64,
    sat_vy: f64,
    sat_vz: f64,
    pseudorange_corrected: f64,
    prr: f64,
    cn0: f64,
    elevation_deg: f64,
    range_sigma: f64,
    rate_sigma: f64,
}

impl TraceRow {
    fn new(utc_s: f64, o: &SatelliteObservation) -> Self {
        Self {
            utc_s,
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
}

/// One timestamped position, degrees; altitude is optional (2D labels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub utc_s: f64,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: Option<f64>,
}

fn check_columns(headers: &csv::StringRecord, required: &[&str]) -> Result<(), BenchError> {
    for &c in required {
        if !headers.iter().any(|h| h.trim() == c) {
            return Err(BenchError::MissingColumn(c.to_string()));
        }
    }
    Ok(())
}

/// Data row number (1-based, header excluded) of a csv error, if known.
fn row_of(e: &csv::Error, fallback: usize) -> usize {
    e.position()
        .map(|p| (p.line() as usize).saturating_sub(1))
        .unwrap_or(fallback)
}

pub fn write_trace(epochs: &[Epoch], w: impl Write) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for e in epochs {
        for o in &e.observations {
            out.serialize(TraceRow::new(e.timestamp, o))?;
        }
    }
    if epochs.iter().all(|e| e.observations.is_empty()) {
        out.write_record(TRACE_HEADER)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a trace file. Rows sharing a timestamp form one epoch; they must
/// be contiguous and epochs strictly increasing in time.
pub fn read_trace(r: impl Read) -> Result<Vec<Epoch>, BenchError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    check_columns(rdr.headers()?, &TRACE_HEADER)?;
    let mut epochs: Vec<Epoch> = Vec::new();
    for (i, rec) in rdr.deserialize::<TraceRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| BenchError::Row {
            row: row_of(&e, row),
            msg: e.to_string(),
        })?;
        let bad = |msg: String| BenchError::Row { row, msg };
        if !(1..=SV as u8).contains(&rec.prn) {
            return Err(bad(format!("prn {} outside 1..={SV}", rec.prn)));
        }
        if !(rec.range_sigma > 0.0) || !(rec.rate_sigma > 0.0) {
            return Err(bad("sigmas must be positive".into()));
        }
        match epochs.last_mut() {
            Some(last) if last.timestamp == rec.utc_s => {
                if last.find(rec.prn).is_some() {
                    return Err(bad(format!("prn {} repeated within an epoch", rec.prn)));
                }
                last.observations.push(rec.observation());
            }
            Some(last) if rec.utc_s < last.timestamp => {
                return Err(BenchError::OutOfOrder {
                    row,
                    utc: rec.utc_s,
                    previous: last.timestamp,
                })
            }
            _ => epochs.push(Epoch {
                timestamp: rec.utc_s,
                observations: vec![rec.observation()],
            }),
        }
    }
    Ok(epochs)
}

pub fn write_labels(points: &[TrackPoint], w: impl Write) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    if points.is_empty() {
        out.write_record(LABEL_HEADER.iter().chain(&["alt_m"]))?;
    }
    for p in points {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a track file (`utc_s, lat_deg, lon_deg[, alt_m]`), time-ordered.
pub fn read_labels(r: impl Read) -> Result<Vec<TrackPoint>, BenchError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    check_columns(rdr.headers()?, &LABEL_HEADER)?;
    let mut out: Vec<TrackPoint> = Vec::new();
    for (i, rec) in rdr.deserialize::<TrackPoint>().enumerate() {
        let row = i + 1;
        let p = rec.map_err(|e| BenchError::Row {
            row: row_of(&e, row),
            msg: e.to_string(),
        })?;
        if !(-90.0..=90.0).contains(&p.lat_deg) || !(-180.0..=180.0).contains(&p.lon_deg) {
            return Err(BenchError::Row {
                row,
                msg: format!("coordinates ({}, {}) out of range", p.lat_deg, p.lon_deg),
            });
        }
        if let Some(last) = out.last() {
            if p.utc_s <= last.utc_s {
                return Err(BenchError::OutOfOrder {
                    row,
                    utc: p.utc_s,
                    previous: last.utc_s,
                });
            }
        }
        out.push(p);
    }
    Ok(out)
}

/// Nearest label within [`JOIN_TOLERANCE`] for every epoch; labels with an
/// altitude become 3D labels. Fails when no epoch can be joined.
pub fn join_labels(epochs: &[Epoch], labels: &[TrackPoint]) -> Result<Vec<Option<Label>>, BenchError> {
    let mut j = 0;
    let joined: Vec<Option<Label>> = epochs
        .iter()
        .map(|e| {
            while j + 1 < labels.len()
                && (labels[j + 1].utc_s - e.timestamp).abs() <= (labels[j].utc_s - e.timestamp).abs()
            {
                j += 1;
            }
            let l = labels.get(j)?;
            if (l.utc_s - e.timestamp).abs() > JOIN_TOLERANCE {
                return None;
            }
            let g = GeodeticPosition::from_degrees(l.lat_deg, l.lon_deg, l.alt_m.unwrap_or(0.0));
            Some(match l.alt_m {
                Some(_) => Label::Ecef(lla_to_ecef(&g)),
                None => Label::LatLon(g.lat, g.lon),
            })
        })
        .collect();
    if !labels.is_empty() && joined.iter().all(Option::is_none) {
        return Err(BenchError::Unjoinable {
            tolerance: JOIN_TOLERANCE,
        });
    }
    Ok(joined)
}

/// Truth track of a simulated trace, with altitude.
pub fn labels_from_sim(trace: &Trace) -> Vec<TrackPoint> {
    trace
        .truth
        .iter()
        .map(|t| {
            let g = t.geodetic();
            TrackPoint {
                utc_s: t.timestamp,
                lat_deg: g.lat_deg(),
                lon_deg: g.lon_deg(),
                alt_m: Some(g.alt),
            }
        })
        .collect()
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn emit_trace(epochs: &[Epoch], path: &Path) -> Result<(), BenchError> {
    let mut buf = Vec::new();
    write_trace(epochs, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn emit_labels(points: &[TrackPoint], path: &Path) -> Result<(), BenchError> {
    let mut buf = Vec::new();
    write_labels(points, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn ingest_trace(path: &Path) -> Result<Vec<Epoch>, BenchError> {
    read_trace(fs::File::open(path)?)
}

pub fn ingest_labels(path: &Path) -> Result<Vec<TrackPoint>, BenchError> {
    read_labels(fs::File::open(path)?)
}

/// Epochs of a trace file, with labels joined when a label file is given.
pub fn ingest(trace: &Path, labels: Option<&Path>) -> Result<(Vec<Epoch>, Option<Vec<Option<Label>>>), BenchError> {
    let epochs = ingest_trace(trace)?;
    let joined = match labels {
        Some(p) => Some(join_labels(&epochs, &ingest_labels(p)?)?),
        None => None,
    };
    Ok((epochs, joined))
}
