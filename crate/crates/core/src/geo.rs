//! WGS-84 frames, conversions and geodesic distance.
//!
//! The ECEF to geodetic conversion is closed form (Vermeille), so it is smooth
//! and its Jacobian can be evaluated analytically. That Jacobian is what the
//! 2D and map-based training losses backpropagate through.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS-84 semi-minor axis (m).
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("user and satellite positions coincide")]
    CoincidentPoints,
    #[error("vincenty inverse did not converge after {0} iterations (near-antipodal points)")]
    VincentyNonConvergence(usize),
}

/// Position in the Earth-Centered Earth-Fixed frame (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPosition(pub Vector3<f64>);

impl EcefPosition {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Geodetic latitude/longitude in radians, altitude above the ellipsoid in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPosition {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

impl GeodeticPosition {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Self {
        Self { lat, lon, alt }
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64, alt: f64) -> Self {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), alt)
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat.to_degrees()
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon.to_degrees()
    }
}

/// Vector expressed in the local north-east-down frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NedVector {
    pub north: f64,
    pub east: f64,
    pub down: f64,
}

impl NedVector {
    pub fn norm(&self) -> f64 {
        (self.north * self.north + self.east * self.east + self.down * self.down).sqrt()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.north, self.east, self.down]
    }
}

/// Prime vertical radius of curvature N(φ).
pub fn prime_vertical_radius(lat: f64) -> f64 {
    let s = lat.sin();
    WGS84_A / (1.0 - WGS84_E2 * s * s).sqrt()
}

/// Meridional radius of curvature M(φ).
pub fn meridional_radius(lat: f64) -> f64 {
    let s = lat.sin();
    WGS84_A * (1.0 - WGS84_E2) / (1.0 - WGS84_E2 * s * s).powf(1.5)
}

pub fn lla_to_ecef(g: &GeodeticPosition) -> EcefPosition {
    let (slat, clat) = g.lat.sin_cos();
    let (slon, clon) = g.lon.sin_cos();
    let n = prime_vertical_radius(g.lat);
    EcefPosition::new(
        (n + g.alt) * clat * clon,
        (n + g.alt) * clat * slon,
        (n * (1.0 - WGS84_E2) + g.alt) * slat,
    )
}

/// Closed-form ECEF to geodetic conversion (Vermeille 2002).
///
/// Points on the rotation axis get longitude 0.
pub fn ecef_to_lla(p: &EcefPosition) -> GeodeticPosition {
    let (x, y, z) = (p.x(), p.y(), p.z());
    let a2 = WGS84_A * WGS84_A;
    let e4 = WGS84_E2 * WGS84_E2;
    let rho2 = x * x + y * y;
    let rho = rho2.sqrt();

    let pp = rho2 / a2;
    let q = (1.0 - WGS84_E2) / a2 * z * z;
    let r = (pp + q - e4) / 6.0;
    let s = e4 * pp * q / (4.0 * r * r * r);
    let t = (1.0 + s + (s * (2.0 + s)).sqrt()).cbrt();
    let u = r * (1.0 + t + 1.0 / t);
    let v = (u * u + e4 * q).sqrt();
    let w = WGS84_E2 * (u + v - q) / (2.0 * v);
    let k = (u + v + w * w).sqrt() - w;
    let d = k * rho / (k + WGS84_E2);
    let dz = (d * d + z * z).sqrt();

    let lat = 2.0 * z.atan2(d + dz);
    let lon = if rho == 0.0 { 0.0 } else { y.atan2(x) };
    let alt = (k + WGS84_E2 - 1.0) / k * dz;
    GeodeticPosition { lat, lon, alt }
}

/// Local north, east and up unit vectors at a geodetic origin, in ECEF.
pub fn local_axes(origin: &GeodeticPosition) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let (slat, clat) = origin.lat.sin_cos();
    let (slon, clon) = origin.lon.sin_cos();
    let north = Vector3::new(-slat * clon, -slat * slon, clat);
    let east = Vector3::new(-slon, clon, 0.0);
    let up = Vector3::new(clat * clon, clat * slon, slat);
    (north, east, up)
}

/// Rotation matrix taking ECEF vectors to NED at `origin` (rows: N, E, D).
pub fn ecef_to_ned_rotation(origin: &GeodeticPosition) -> Matrix3<f64> {
    let (n, e, u) = local_axes(origin);
    Matrix3::from_rows(&[n.transpose(), e.transpose(), (-u).transpose()])
}

pub fn ecef_vector_to_ned(v: &Vector3<f64>, origin: &GeodeticPosition) -> NedVector {
    let r = ecef_to_ned_rotation(origin) * v;
    NedVector {
        north: r.x,
        east: r.y,
        down: r.z,
    }
}

/// ∂(x, y, z)/∂(lat, lon, alt), columns ordered lat, lon, alt.
pub fn lla_to_ecef_jacobian(g: &GeodeticPosition) -> Matrix3<f64> {
    let (n_hat, e_hat, u_hat) = local_axes(g);
    let m = meridional_radius(g.lat);
    let n = prime_vertical_radius(g.lat);
    Matrix3::from_columns(&[
        n_hat * (m + g.alt),
        e_hat * ((n + g.alt) * g.lat.cos()),
        u_hat,
    ])
}

/// ∂(lat, lon, alt)/∂(x, y, z) of [`ecef_to_lla`], rows ordered lat, lon, alt.
///
/// The columns of the forward Jacobian are orthogonal, so the inverse is the
/// scaled transpose. Undefined on the polar axis.
pub fn ecef_to_lla_jacobian(p: &EcefPosition) -> Matrix3<f64> {
    let g = ecef_to_lla(p);
    let (n_hat, e_hat, u_hat) = local_axes(&g);
    let m = meridional_radius(g.lat);
    let n = prime_vertical_radius(g.lat);
    Matrix3::from_rows(&[
        (n_hat / (m + g.alt)).transpose(),
        (e_hat / ((n + g.alt) * g.lat.cos())).transpose(),
        u_hat.transpose(),
    ])
}

/// Unit vector from satellite to user and the geometric range between them.
pub fn unit_geometry_vector(
    user: &EcefPosition,
    sat: &EcefPosition,
) -> Result<(Vector3<f64>, f64), GeoError> {
    let d = user.0 - sat.0;
    let range = d.norm();
    if range == 0.0 || !range.is_finite() {
        return Err(GeoError::CoincidentPoints);
    }
    Ok((d / range, range))
}

/// Equirectangular tangent approximation around a reference latitude/longitude,
/// with per-axis meter scales taken from the ellipsoid radii at the origin.
/// Adequate for areas of a few kilometers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// meters per radian of latitude
    pub north_scale: f64,
    /// meters per radian of longitude
    pub east_scale: f64,
}

impl LocalProjection {
    pub fn new(origin_lat: f64, origin_lon: f64) -> Self {
        Self {
            origin_lat,
            origin_lon,
            north_scale: meridional_radius(origin_lat),
            east_scale: prime_vertical_radius(origin_lat) * origin_lat.cos(),
        }
    }

    /// (east, north) in meters.
    pub fn forward(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (lon - self.origin_lon) * self.east_scale,
            (lat - self.origin_lat) * self.north_scale,
        )
    }

    /// (lat, lon) in radians.
    pub fn inverse(&self, east: f64, north: f64) -> (f64, f64) {
        (
            self.origin_lat + north / self.north_scale,
            self.origin_lon + east / self.east_scale,
        )
    }
}

const VINCENTY_MAX_ITER: usize = 200;

/// Ellipsoidal distance (Vincenty inverse) between the horizontal components
/// of two positions. Altitude is ignored.
pub fn geodesic_distance(a: &GeodeticPosition, b: &GeodeticPosition) -> Result<f64, GeoError> {
    let f = WGS84_F;
    let big_l = b.lon - a.lon;
    let u1 = ((1.0 - f) * a.lat.tan()).atan();
    let u2 = ((1.0 - f) * b.lat.tan()).atan();
    let (su1, cu1) = u1.sin_cos();
    let (su2, cu2) = u2.sin_cos();

    let mut lambda = big_l;
    for _ in 0..VINCENTY_MAX_ITER {
        let (sl, cl) = lambda.sin_cos();
        let sin_sigma = ((cu2 * sl).powi(2) + (cu1 * su2 - su1 * cu2 * cl).powi(2)).sqrt();
        if sin_sigma == 0.0 {
            return Ok(0.0);
        }
        let cos_sigma = su1 * su2 + cu1 * cu2 * cl;
        let sigma = sin_sigma.atan2(cos_sigma);
        let sin_alpha = cu1 * cu2 * sl / sin_sigma;
        let cos2_alpha = 1.0 - sin_alpha * sin_alpha;
        // equatorial line: cos²α = 0
        let cos_2sm = if cos2_alpha != 0.0 {
            cos_sigma - 2.0 * su1 * su2 / cos2_alpha
        } else {
            0.0
        };
        let c = f / 16.0 * cos2_alpha * (4.0 + f * (4.0 - 3.0 * cos2_alpha));
        let prev = lambda;
        lambda = big_l
            + (1.0 - c)
                * f
                * sin_alpha
                * (sigma
                    + c * sin_sigma
                        * (cos_2sm + c * cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)));
        if (lambda - prev).abs() < 1e-12 {
            let u_sq = cos2_alpha * (WGS84_A * WGS84_A - WGS84_B * WGS84_B) / (WGS84_B * WGS84_B);
            let big_a =
                1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)));
            let big_b = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)));
            let delta_sigma = big_b
                * sin_sigma
                * (cos_2sm
                    + big_b / 4.0
                        * (cos_sigma * (-1.0 + 2.0 * cos_2sm * cos_2sm)
                            - big_b / 6.0
                                * cos_2sm
                                * (-3.0 + 4.0 * sin_sigma * sin_sigma)
                                * (-3.0 + 4.0 * cos_2sm * cos_2sm)));
            return Ok(WGS84_B * big_a * (sigma - delta_sigma));
        }
    }
    Err(GeoError::VincentyNonConvergence(VINCENTY_MAX_ITER))
}
