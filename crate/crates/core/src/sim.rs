//! Synthetic GNSS scenarios: a circular-orbit constellation, user
//! trajectories, a repeatable site-dependent ranging-error field and noisy
//! pseudorange / pseudorange-rate epochs with their ground truth.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edf::{interpolate_route, EdfError, RoutePolyline};
use crate::geo::{
    ecef_to_lla, ecef_vector_to_ned, lla_to_ecef, lla_to_ecef_jacobian, local_axes,
    unit_geometry_vector, EcefPosition, GeodeticPosition, LocalProjection,
};
use crate::model::{Epoch, SatelliteObservation, StateVector, SV};

pub const ORBIT_RADIUS: f64 = 26_560_000.0;
pub const ORBIT_INCLINATION: f64 = 55.0 * PI / 180.0;
pub const ORBIT_PLANES: usize = 6;
pub const EARTH_GM: f64 = 3.986_004_418e14;
pub const EARTH_ROTATION_RATE: f64 = 7.292_115_146_7e-5;
pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Reported sigmas used when the configured noise is exactly zero.
pub const RANGE_SIGMA_FLOOR: f64 = 1.0;
pub const RATE_SIGMA_FLOOR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("noise sigmas must be non-negative")]
    NegativeSigma,
    #[error("route speed must be positive, got {0}")]
    NonPositiveSpeed(f64),
    #[error("route: {0}")]
    Route(#[from] EdfError),
    #[error("need at least 2 days to split, got {0}")]
    TooFewDays(usize),
}

/// Seeded orbital elements of one satellite.
#[derive(Debug, Clone, Copy)]
struct OrbitSlot {
    raan: f64,
    phase: f64,
}

#[derive(Debug, Clone)]
pub struct Constellation {
    slots: Vec<OrbitSlot>,
}

impl Constellation {
    /// 32 satellites on six evenly spaced planes, with seeded phasing.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_57E1);
        let raan0 = rng.random_range(0.0..TAU);
        let slots = (0..SV)
            .map(|i| {
                let plane = i % ORBIT_PLANES;
                let index = i / ORBIT_PLANES;
                let in_plane = SV.div_ceil(ORBIT_PLANES);
                OrbitSlot {
                    raan: raan0 + plane as f64 * TAU / ORBIT_PLANES as f64,
                    phase: index as f64 * TAU / in_plane as f64
                        + plane as f64 * TAU / SV as f64
                        + rng.random_range(-0.2..0.2),
                }
            })
            .collect();
        Self { slots }
    }

    /// ECEF position and velocity of satellite `prn` at `t` seconds of day.
    pub fn state(&self, prn: u8, t: f64) -> (EcefPosition, Vector3<f64>) {
        let slot = self.slots[usize::from(prn) - 1];
        let n = (EARTH_GM / ORBIT_RADIUS.powi(3)).sqrt();
        let u = slot.phase + n * t;
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), slot.raan)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), ORBIT_INCLINATION);
        let r_i = rot * Vector3::new(u.cos(), u.sin(), 0.0) * ORBIT_RADIUS;
        let v_i = rot * Vector3::new(-u.sin(), u.cos(), 0.0) * (ORBIT_RADIUS * n);
        let theta = EARTH_ROTATION_RATE * t;
        let to_ecef = Rotation3::from_axis_angle(&Vector3::z_axis(), -theta);
        let r = to_ecef * r_i;
        let omega = Vector3::new(0.0, 0.0, EARTH_ROTATION_RATE);
        let v = to_ecef * v_i - omega.cross(&r);
        (EcefPosition(r), v)
    }
}

/// Per-PRN ECEF positions and velocities for all satellites at `t`.
pub fn constellation_at(t: f64, seed: u64) -> Vec<(u8, EcefPosition, Vector3<f64>)> {
    let c = Constellation::new(seed);
    (1..=SV as u8)
        .map(|prn| {
            let (p, v) = c.state(prn, t);
            (prn, p, v)
        })
        .collect()
}

/// Elevation and azimuth (radians) of `sat` seen from `user`.
pub fn elevation_azimuth(user: &GeodeticPosition, user_ecef: &EcefPosition, sat: &EcefPosition) -> (f64, f64) {
    let ned = ecef_vector_to_ned(&(sat.0 - user_ecef.0), user);
    let horiz = ned.north.hypot(ned.east);
    let el = (-ned.down).atan2(horiz);
    let az = ned.east.atan2(ned.north).rem_euclid(TAU);
    (el, az)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Site {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

impl Default for Site {
    fn default() -> Self {
        Self {
            lat_deg: 22.3193,
            lon_deg: 114.1694,
            alt_m: 10.0,
        }
    }
}

impl Site {
    pub fn geodetic(&self) -> GeodeticPosition {
        GeodeticPosition::from_degrees(self.lat_deg, self.lon_deg, self.alt_m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    /// Straight line through the site with a constant ENU velocity (m/s).
    ConstantVelocity { velocity_enu: [f64; 3] },
    /// Constant-speed, constant-altitude traversal of a waypoint route
    /// (`[lat_deg, lon_deg]`), looping back to the start when `closed`.
    Route {
        waypoints: Vec<[f64; 2]>,
        speed: f64,
        #[serde(default = "default_true")]
        closed: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorFieldConfig {
    /// Multiplier on the whole field; 0 disables injected biases.
    pub scale: f64,
    pub max_bias: f64,
    /// Peak street-canyon bias for low satellites across the street axis.
    pub canyon_amplitude: f64,
    /// Elevation e-folding scale of the canyon term, radians.
    pub canyon_elevation: f64,
    pub bumps: usize,
    pub bump_amplitude: f64,
    /// Street heading (radians from north) used when the user is not moving.
    pub street_heading: f64,
}

impl Default for ErrorFieldConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            max_bias: 50.0,
            canyon_amplitude: 35.0,
            canyon_elevation: 0.6,
            bumps: 8,
            bump_amplitude: 25.0,
            street_heading: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Bump {
    elevation: f64,
    azimuth: f64,
    el_width: f64,
    az_width: f64,
    amplitude: f64,
}

/// Deterministic, bounded, non-negative ranging bias as a function of the
/// satellite's elevation and azimuth relative to the street axis.
#[derive(Debug, Clone)]
pub struct ErrorField {
    cfg: ErrorFieldConfig,
    bumps: Vec<Bump>,
    prn_scale: [f64; SV],
}

impl ErrorField {
    pub fn new(cfg: ErrorFieldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
        let bumps = (0..cfg.bumps)
            .map(|_| Bump {
                elevation: rng.random_range(0.15..1.2),
                azimuth: rng.random_range(0.0..TAU),
                el_width: rng.random_range(0.12..0.3),
                az_width: rng.random_range(0.3..0.8),
                amplitude: cfg.bump_amplitude * rng.random_range(0.4..1.0),
            })
            .collect();
        let mut prn_scale = [0.0; SV];
        for s in prn_scale.iter_mut() {
            *s = rng.random_range(0.7..1.0);
        }
        Self {
            cfg,
            bumps,
            prn_scale,
        }
    }

    pub fn max_bias(&self) -> f64 {
        self.cfg.max_bias
    }

    /// Bias in meters for `prn` at elevation/azimuth (radians) with the
    /// street axis at `heading` (radians from north).
    pub fn bias(&self, prn: u8, elevation: f64, azimuth: f64, heading: f64) -> f64 {
        if self.cfg.scale == 0.0 {
            return 0.0;
        }
        let across = (azimuth - heading).sin();
        let canyon = self.cfg.canyon_amplitude
            * across
            * across
            * (-(elevation / self.cfg.canyon_elevation).powi(2)).exp();
        // Bumps live in the street frame so they follow the route's turns.
        let rel = (azimuth - heading).rem_euclid(TAU);
        let bumps: f64 = self
            .bumps
            .iter()
            .map(|b| {
                let daz = wrap_angle(rel - b.azimuth);
                let del = elevation - b.elevation;
                b.amplitude
                    * (-(del * del) / (2.0 * b.el_width * b.el_width)
                        - (daz * daz) / (2.0 * b.az_width * b.az_width))
                        .exp()
            })
            .sum();
        let scale = self.prn_scale[usize::from(prn) - 1] * self.cfg.scale;
        (scale * (canyon + bumps)).clamp(0.0, self.cfg.max_bias)
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Day index; noise differs per day, geometry and biases do not.
    pub day: u32,
    pub duration: f64,
    pub rate: f64,
    /// Seconds of day at the first epoch.
    pub start_time_of_day: f64,
    pub site: Site,
    pub trajectory: Trajectory,
    pub sigma_range: f64,
    pub sigma_rate: f64,
    pub clock_offset: f64,
    pub clock_drift: f64,
    pub elevation_mask_deg: f64,
    pub error_field: ErrorFieldConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            day: 0,
            duration: 600.0,
            rate: 1.0,
            start_time_of_day: 3600.0,
            site: Site::default(),
            trajectory: Trajectory::Static,
            sigma_range: 3.0,
            sigma_rate: 0.1,
            clock_offset: 150.0,
            clock_drift: 0.5,
            elevation_mask_deg: 10.0,
            error_field: ErrorFieldConfig::default(),
        }
    }
}

impl ScenarioConfig {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0) {
            return Err(SimError::NonPositiveDuration(self.duration));
        }
        if !(self.rate > 0.0) {
            return Err(SimError::NonPositiveRate(self.rate));
        }
        if self.sigma_range < 0.0 || self.sigma_rate < 0.0 {
            return Err(SimError::NegativeSigma);
        }
        if let Trajectory::Route { speed, .. } = &self.trajectory {
            if !(*speed > 0.0) {
                return Err(SimError::NonPositiveSpeed(*speed));
            }
        }
        Ok(())
    }

    pub fn epoch_count(&self) -> usize {
        (self.duration * self.rate).floor() as usize
    }

    /// UTC-like timestamp of epoch `k` (days are 86 400 s apart).
    pub fn timestamp(&self, k: usize) -> f64 {
        f64::from(self.day) * SECONDS_PER_DAY + self.time_of_day(k)
    }

    pub fn time_of_day(&self, k: usize) -> f64 {
        self.start_time_of_day + k as f64 / self.rate
    }
}

/// Injected bias and truth for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub timestamp: f64,
    pub state: StateVector,
    /// `(prn, bias_m)` for every visible satellite, in observation order.
    pub biases: Vec<(u8, f64)>,
}

impl TruthRecord {
    pub fn geodetic(&self) -> GeodeticPosition {
        ecef_to_lla(&self.state.ecef())
    }

    pub fn bias(&self, prn: u8) -> Option<f64> {
        self.biases.iter().find(|(p, _)| *p == prn).map(|(_, b)| *b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub day: u32,
    pub epochs: Vec<Epoch>,
    pub truth: Vec<TruthRecord>,
    pub warnings: Vec<String>,
}

impl Trace {
    /// Injected biases aligned with each epoch's observation order.
    pub fn true_corrections(&self) -> Vec<Vec<f64>> {
        self.truth
            .iter()
            .map(|t| t.biases.iter().map(|(_, b)| *b).collect())
            .collect()
    }

    pub fn zero_corrections(&self) -> Vec<Vec<f64>> {
        self.epochs
            .iter()
            .map(|e| vec![0.0; e.visible_count()])
            .collect()
    }
}

/// Kinematic truth along the configured trajectory.
struct Kinematics {
    origin: GeodeticPosition,
    path: Option<RoutePath>,
    velocity_ecef: Vector3<f64>,
}

struct RoutePath {
    proj: LocalProjection,
    alt: f64,
    points: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
    speed: f64,
}

impl RoutePath {
    fn new(waypoints: &[[f64; 2]], speed: f64, closed: bool, alt: f64) -> Result<Self, SimError> {
        let mut wps: Vec<(f64, f64)> = waypoints.iter().map(|w| (w[0], w[1])).collect();
        if closed && wps.first() != wps.last() {
            wps.push(wps[0]);
        }
        let dense = interpolate_route(&RoutePolyline::from_degrees(&wps)?, 1.0)?;
        let proj = dense.projection();
        let points: Vec<(f64, f64)> = dense
            .points()
            .iter()
            .map(|p| proj.forward(p.lat, p.lon))
            .collect();
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Ok(Self {
            proj,
            alt,
            points,
            cumulative,
            speed,
        })
    }

    /// Position (lat, lon, alt) and (east, north) velocity at time `t`.
    fn at(&self, t: f64) -> (GeodeticPosition, (f64, f64)) {
        let total = *self.cumulative.last().unwrap();
        let s = (self.speed * t).rem_euclid(total);
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let f = (s - self.cumulative[i]) / seg;
        let (a, b) = (self.points[i], self.points[i + 1]);
        let east = a.0 + f * (b.0 - a.0);
        let north = a.1 + f * (b.1 - a.1);
        let (lat, lon) = self.proj.inverse(east, north);
        let dir = ((b.0 - a.0) / seg, (b.1 - a.1) / seg);
        (
            GeodeticPosition::new(lat, lon, self.alt),
            (self.speed * dir.0, self.speed * dir.1),
        )
    }
}

impl Kinematics {
    fn new(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        let origin = cfg.site.geodetic();
        let (north, east, up) = local_axes(&origin);
        let mut velocity_ecef = Vector3::zeros();
        let mut path = None;
        match &cfg.trajectory {
            Trajectory::Static => {}
            Trajectory::ConstantVelocity { velocity_enu } => {
                velocity_ecef = east * velocity_enu[0] + north * velocity_enu[1] + up * velocity_enu[2];
            }
            Trajectory::Route {
                waypoints,
                speed,
                closed,
            } => path = Some(RoutePath::new(waypoints, *speed, *closed, cfg.site.alt_m)?),
        }
        Ok(Self {
            origin,
            path,
            velocity_ecef,
        })
    }

    /// ECEF position/velocity and street heading at `t` seconds since start.
    fn at(&self, t: f64, default_heading: f64) -> (Vector3<f64>, Vector3<f64>, f64) {
        match &self.path {
            None => {
                let p = lla_to_ecef(&self.origin).0 + self.velocity_ecef * t;
                let heading = if self.velocity_ecef.norm() > 0.1 {
                    let ned = ecef_vector_to_ned(&self.velocity_ecef, &self.origin);
                    ned.east.atan2(ned.north)
                } else {
                    default_heading
                };
                (p, self.velocity_ecef, heading)
            }
            Some(path) => {
                let (g, (ve, vn)) = path.at(t);
                let rates = Vector3::new(
                    vn / path.proj.north_scale,
                    ve / path.proj.east_scale,
                    0.0,
                );
                let v = lla_to_ecef_jacobian(&g) * rates;
                (lla_to_ecef(&g).0, v, ve.atan2(vn))
            }
        }
    }
}

/// Generates one day of epochs and their truth.
pub fn synthesize_trace(cfg: &ScenarioConfig) -> Result<Trace, SimError> {
    cfg.validate()?;
    let constellation = Constellation::new(cfg.seed);
    let field = ErrorField::new(cfg.error_field, cfg.seed);
    let kin = Kinematics::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(cfg.day));
    let range_noise = Normal::new(0.0, cfg.sigma_range).expect("sigma validated");
    let rate_noise = Normal::new(0.0, cfg.sigma_rate).expect("sigma validated");
    let cn0_noise = Normal::new(0.0, 1.0).expect("unit sigma");
    let mask = cfg.elevation_mask_deg.to_radians();
    let range_sigma = if cfg.sigma_range > 0.0 { cfg.sigma_range } else { RANGE_SIGMA_FLOOR };
    let rate_sigma = if cfg.sigma_rate > 0.0 { cfg.sigma_rate } else { RATE_SIGMA_FLOOR };

    let n = cfg.epoch_count();
    let mut epochs = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    for k in 0..n {
        let t = k as f64 / cfg.rate;
        let tod = cfg.time_of_day(k);
        let (pos, vel, heading) = kin.at(t, cfg.error_field.street_heading);
        let clock = cfg.clock_offset + cfg.clock_drift * t;
        let state = StateVector::from_parts(&pos, &vel, clock, cfg.clock_drift);
        let user = EcefPosition(pos);
        let user_lla = ecef_to_lla(&user);

        let mut observations = Vec::new();
        let mut biases = Vec::new();
        for prn in 1..=SV as u8 {
            let (sat, sat_vel) = constellation.state(prn, tod);
            let (el, az) = elevation_azimuth(&user_lla, &user, &sat);
            if el < mask {
                continue;
            }
            let (g, range) = unit_geometry_vector(&user, &sat).expect("satellite is far from user");
            let bias = field.bias(prn, el, az, heading);
            let eps_r = if cfg.sigma_range > 0.0 { range_noise.sample(&mut rng) } else { 0.0 };
            let eps_d = if cfg.sigma_rate > 0.0 { rate_noise.sample(&mut rng) } else { 0.0 };
            let cn0 = 22.0 + 20.0 * el.sin() - 0.2 * bias + cn0_noise.sample(&mut rng);
            observations.push(SatelliteObservation {
                prn,
                sat_position: sat,
                sat_velocity: sat_vel,
                pseudorange: range + clock + bias + eps_r,
                pseudorange_rate: (vel - sat_vel).dot(&g) + cfg.clock_drift + eps_d,
                cn0,
                elevation_deg: el.to_degrees(),
                range_sigma,
                rate_sigma,
            });
            biases.push((prn, bias));
        }
        let timestamp = cfg.timestamp(k);
        if observations.len() < 4 {
            warnings.push(format!(
                "epoch {k} (t={timestamp}): only {} visible satellites",
                observations.len()
            ));
        }
        epochs.push(Epoch {
            timestamp,
            observations,
        });
        truth.push(TruthRecord {
            timestamp,
            state,
            biases,
        });
    }
    Ok(Trace {
        day: cfg.day,
        epochs,
        truth,
        warnings,
    })
}

/// The same scenario generated on `days` consecutive days.
pub fn synthesize_days(cfg: &ScenarioConfig, days: u32) -> Result<Vec<Trace>, SimError> {
    (0..days)
        .map(|d| {
            synthesize_trace(&ScenarioConfig {
                day: cfg.day + d,
                ..cfg.clone()
            })
        })
        .collect()
}

/// Holds out the last day for testing.
pub fn split_days(mut traces: Vec<Trace>) -> Result<(Vec<Trace>, Trace), SimError> {
    if traces.len() < 2 {
        return Err(SimError::TooFewDays(traces.len()));
    }
    traces.sort_by_key(|t| t.day);
    let test = traces.pop().expect("length checked");
    Ok((traces, test))
}

/// A closed loop of city-block waypoints around `site`, sized in meters.
pub fn block_loop(site: &Site, width: f64, height: f64) -> Vec<[f64; 2]> {
    let proj = LocalProjection::new(site.lat_deg.to_radians(), site.lon_deg.to_radians());
    [
        (0.0, 0.0),
        (width, 0.0),
        (width, height),
        (0.35 * width, height),
        (0.0, 0.6 * height),
    ]
    .iter()
    .map(|&(e, n)| {
        let (lat, lon) = proj.inverse(e, n);
        [lat.to_degrees(), lon.to_degrees()]
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::predict_measurements;
    use approx::assert_abs_diff_eq;

    #[test]
    fn circular_orbits() {
        for t in [0.0, 1234.5, 40_000.0] {
            for (_, p, v) in constellation_at(t, 3) {
                assert!((p.norm() - ORBIT_RADIUS).abs() < 1.0);
                assert!(p.0.dot(&v).abs() <= 1e-3 * p.norm() * v.norm());
            }
        }
    }

    #[test]
    fn velocity_matches_finite_difference() {
        let c = Constellation::new(11);
        let h = 0.01;
        for prn in 1..=SV as u8 {
            let (p0, v) = c.state(prn, 500.0);
            let (p1, _) = c.state(prn, 500.0 + h);
            let fd = (p1.0 - p0.0) / h;
            assert!((fd - v).norm() <= 1e-4 * v.norm());
        }
    }

    #[test]
    fn constellation_is_seeded() {
        let a = constellation_at(100.0, 1);
        let b = constellation_at(100.0, 1);
        let c = constellation_at(100.0, 2);
        assert_eq!(a[0].1, b[0].1);
        assert_ne!(a[0].1, c[0].1);
    }

    fn quiet(trajectory: Trajectory) -> ScenarioConfig {
        ScenarioConfig {
            duration: 30.0,
            sigma_range: 0.0,
            sigma_rate: 0.0,
            trajectory,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_measurements_match_model() {
        for traj in [
            Trajectory::Static,
            Trajectory::ConstantVelocity {
                velocity_enu: [8.0, -3.0, 0.2],
            },
            Trajectory::Route {
                waypoints: block_loop(&Site::default(), 200.0, 150.0),
                speed: 10.0,
                closed: true,
            },
        ] {
            let mut cfg = quiet(traj);
            cfg.error_field.scale = 0.0;
            let trace = synthesize_trace(&cfg).unwrap();
            for (e, t) in trace.epochs.iter().zip(&trace.truth) {
                assert!(e.visible_count() >= 4);
                let pred = predict_measurements(&t.state, &t.state, &e.observations).unwrap();
                for (n, o) in e.observations.iter().enumerate() {
                    assert!((pred[2 * n] - o.pseudorange).abs() <= 1e-9 * o.pseudorange.abs().max(1.0) + 1e-8);
                    assert!((pred[2 * n + 1] - o.pseudorange_rate).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn bias_bookkeeping_is_exact() {
        let cfg = quiet(Trajectory::Static);
        let trace = synthesize_trace(&cfg).unwrap();
        let mut any_bias = false;
        for (e, t) in trace.epochs.iter().zip(&trace.truth) {
            for o in &e.observations {
                let (_, range) = unit_geometry_vector(&t.state.ecef(), &o.sat_position).unwrap();
                let b = t.bias(o.prn).unwrap();
                assert!((o.pseudorange - range - t.state.clock_offset() - b).abs() <= 1e-7);
                assert!((0.0..=50.0).contains(&b));
                any_bias |= b > 1.0;
            }
        }
        assert!(any_bias);
    }

    #[test]
    fn days_repeat_biases_but_not_noise() {
        let cfg = ScenarioConfig {
            duration: 20.0,
            trajectory: Trajectory::Route {
                waypoints: block_loop(&Site::default(), 300.0, 200.0),
                speed: 8.0,
                closed: true,
            },
            ..Default::default()
        };
        let days = synthesize_days(&cfg, 3).unwrap();
        let (train, test) = split_days(days.clone()).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.day, 2);
        for d in &days[1..] {
            for (a, b) in d.truth.iter().zip(&days[0].truth) {
                assert_eq!(a.biases, b.biases);
                assert_abs_diff_eq!(a.timestamp - b.timestamp, SECONDS_PER_DAY * f64::from(d.day));
            }
        }
        assert_ne!(
            days[0].epochs[3].observations[0].pseudorange,
            days[1].epochs[3].observations[0].pseudorange
        );
        assert!(matches!(split_days(days[..1].to_vec()), Err(SimError::TooFewDays(1))));
    }

    #[test]
    fn route_truth_stays_on_route() {
        let site = Site::default();
        let wps = block_loop(&site, 250.0, 180.0);
        let cfg = ScenarioConfig {
            duration: 120.0,
            trajectory: Trajectory::Route {
                waypoints: wps.clone(),
                speed: 10.0,
                closed: true,
            },
            ..Default::default()
        };
        let trace = synthesize_trace(&cfg).unwrap();
        let mut closed: Vec<(f64, f64)> = wps.iter().map(|w| (w[0], w[1])).collect();
        closed.push(closed[0]);
        let route = RoutePolyline::from_degrees(&closed).unwrap();
        let dense = interpolate_route(&route, 1.0).unwrap();
        let proj = route.projection();
        for t in &trace.truth {
            let g = t.geodetic();
            assert!(dense.distance_to(g.lat, g.lon, &proj) < 0.05);
            assert_abs_diff_eq!(g.alt, site.alt_m, epsilon = 1e-6);
            assert_abs_diff_eq!(t.state.velocity().norm(), 10.0, epsilon = 0.05);
        }
        // velocity is the derivative of position
        for w in trace.truth.windows(2) {
            let fd = w[1].state.position() - w[0].state.position();
            let mid = 0.5 * (w[0].state.velocity() + w[1].state.velocity());
            assert!((fd - mid).norm() < 1.0);
        }
    }

    #[test]
    fn sparse_sky_is_flagged() {
        let cfg = ScenarioConfig {
            duration: 5.0,
            elevation_mask_deg: 80.0,
            ..Default::default()
        };
        let trace = synthesize_trace(&cfg).unwrap();
        assert!(!trace.warnings.is_empty());
    }

    #[test]
    fn invalid_configs() {
        let bad = ScenarioConfig {
            duration: 0.0,
            ..Default::default()
        };
        assert!(matches!(synthesize_trace(&bad), Err(SimError::NonPositiveDuration(_))));
        let bad = ScenarioConfig {
            sigma_range: -1.0,
            ..Default::default()
        };
        assert!(matches!(synthesize_trace(&bad), Err(SimError::NegativeSigma)));
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = ScenarioConfig {
            trajectory: Trajectory::Route {
                waypoints: vec![[22.3, 114.17], [22.301, 114.171]],
                speed: 5.0,
                closed: false,
            },
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
