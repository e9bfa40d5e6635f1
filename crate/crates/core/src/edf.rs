//! Euclidean distance field cost maps built from reference routes.
//!
//! Pipeline: waypoints → cubic-spline densification → binary occupancy grid on
//! a latitude/longitude lattice → exact Euclidean distance transform (meters)
//! → 5×5 Gaussian smoothing → bilinear, differentiable sampling.
//!
//! # Map file format
//!
//! All fields little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `NERCEDF1` |
//! | 4     | `u32` version (1) |
//! | 8     | `f64` latitude of cell (0, 0) center, degrees |
//! | 8     | `f64` longitude of cell (0, 0) center, degrees |
//! | 8     | `f64` latitude resolution, degrees per row |
//! | 8     | `f64` longitude resolution, degrees per column |
//! | 4     | `u32` rows |
//! | 4     | `u32` cols |
//! | 1     | `u8` smoothed flag |
//! | 8·rows·cols | `f64` potentials in meters, row-major (row = latitude index) |

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeodeticPosition, LocalProjection};

const MAGIC: &[u8; 8] = b"NERCEDF1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EdfError {
    #[error("route needs at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoints {0} and {1} coincide")]
    DuplicateWaypoint(usize, usize),
    #[error("spacing must be positive, got {0}")]
    NonPositiveSpacing(f64),
    #[error("route set is empty")]
    EmptyRoute,
    #[error("occupancy grid has no occupied cell")]
    EmptyGrid,
    #[error("map is already smoothed")]
    AlreadySmoothed,
    #[error("waypoint line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("kml has no LineString coordinates")]
    NoLineString,
    #[error("invalid map file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered route waypoints; altitude is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePolyline {
    points: Vec<GeodeticPosition>,
}

impl RoutePolyline {
    pub fn new(points: Vec<GeodeticPosition>) -> Result<Self, EdfError> {
        if points.len() < 2 {
            return Err(EdfError::TooFewWaypoints(points.len()));
        }
        for i in 1..points.len() {
            if points[i].lat == points[i - 1].lat && points[i].lon == points[i - 1].lon {
                return Err(EdfError::DuplicateWaypoint(i - 1, i));
            }
        }
        Ok(Self { points })
    }

    pub fn from_degrees(latlon: &[(f64, f64)]) -> Result<Self, EdfError> {
        Self::new(
            latlon
                .iter()
                .map(|&(lat, lon)| GeodeticPosition::from_degrees(lat, lon, 0.0))
                .collect(),
        )
    }

    pub fn points(&self) -> &[GeodeticPosition] {
        &self.points
    }

    pub fn mean_latitude(&self) -> f64 {
        self.points.iter().map(|p| p.lat).sum::<f64>() / self.points.len() as f64
    }

    pub fn projection(&self) -> LocalProjection {
        let p = &self.points[0];
        LocalProjection::new(p.lat, p.lon)
    }

    /// Total polyline length in meters under `proj`.
    pub fn length(&self, proj: &LocalProjection) -> f64 {
        self.local(proj)
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum()
    }

    /// Shortest distance (m) from a point to the polyline segments under `proj`.
    pub fn distance_to(&self, lat: f64, lon: f64, proj: &LocalProjection) -> f64 {
        let (px, py) = proj.forward(lat, lon);
        self.local(proj)
            .windows(2)
            .map(|w| point_segment_distance((px, py), w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    fn local(&self, proj: &LocalProjection) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|p| proj.forward(p.lat, p.lon))
            .collect()
    }
}

pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Parses `lat_deg,lon_deg` lines. Blank lines, `#` comments and a
/// non-numeric header line are skipped.
pub fn parse_waypoints_csv(text: &str) -> Result<RoutePolyline, EdfError> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(EdfError::Parse {
                line: i + 1,
                msg: "expected lat_deg,lon_deg".into(),
            });
        }
        match (fields[0].parse::<f64>(), fields[1].parse::<f64>()) {
            (Ok(lat), Ok(lon)) => pts.push((lat, lon)),
            _ if pts.is_empty() && i == 0 => continue,
            _ => {
                return Err(EdfError::Parse {
                    line: i + 1,
                    msg: format!("not a number: {line}"),
                })
            }
        }
    }
    RoutePolyline::from_degrees(&pts)
}

/// Extracts every `LineString` from a KML document. Coordinates are
/// whitespace-separated `lon,lat[,alt]` tuples.
pub fn parse_kml(text: &str) -> Result<Vec<RoutePolyline>, EdfError> {
    let mut routes = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("<LineString") {
        rest = &rest[start..];
        let end = rest.find("</LineString>").ok_or(EdfError::NoLineString)?;
        let block = &rest[..end];
        rest = &rest[end..];
        let Some(open) = block.find("<coordinates>") else {
            continue;
        };
        let body = &block[open + "<coordinates>".len()..];
        let close = body.find("</coordinates>").ok_or(EdfError::NoLineString)?;
        let mut pts = Vec::new();
        for tuple in body[..close].split_whitespace() {
            let parts: Vec<&str> = tuple.split(',').collect();
            if parts.len() < 2 {
                return Err(EdfError::Parse {
                    line: 0,
                    msg: format!("bad coordinate tuple {tuple:?}"),
                });
            }
            let lon: f64 = parts[0].parse().map_err(|_| EdfError::Parse {
                line: 0,
                msg: format!("bad longitude {:?}", parts[0]),
            })?;
            let lat: f64 = parts[1].parse().map_err(|_| EdfError::Parse {
                line: 0,
                msg: format!("bad latitude {:?}", parts[1]),
            })?;
            pts.push((lat, lon));
        }
        routes.push(RoutePolyline::from_degrees(&pts)?);
    }
    if routes.is_empty() {
        return Err(EdfError::NoLineString);
    }
    Ok(routes)
}

/// Natural cubic spline through `(s_i, y_i)`; returns second derivatives.
fn natural_spline_moments(s: &[f64], y: &[f64]) -> Vec<f64> {
    let n = s.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on the interior equations.
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    let mut lower = vec![0.0; k];
    let mut upper = vec![0.0; k];
    for j in 0..k {
        let i = j + 1;
        let h0 = s[i] - s[i - 1];
        let h1 = s[i + 1] - s[i];
        lower[j] = h0;
        diag[j] = 2.0 * (h0 + h1);
        upper[j] = h1;
        rhs[j] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    for j in 1..k {
        let w = lower[j] / diag[j - 1];
        diag[j] -= w * upper[j - 1];
        rhs[j] -= w * rhs[j - 1];
    }
    let mut sol = vec![0.0; k];
    sol[k - 1] = rhs[k - 1] / diag[k - 1];
    for j in (0..k - 1).rev() {
        sol[j] = (rhs[j] - upper[j] * sol[j + 1]) / diag[j];
    }
    m[1..n - 1].copy_from_slice(&sol);
    m
}

fn spline_eval(s: &[f64], y: &[f64], m: &[f64], i: usize, t: f64) -> f64 {
    let h = s[i + 1] - s[i];
    let a = 1.0 - t;
    let b = t;
    a * y[i] + b * y[i + 1] + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0
}

/// Densifies a route with a chord-length parameterized natural cubic spline.
/// Consecutive output samples are at most `spacing` meters apart and every
/// original waypoint is reproduced exactly.
pub fn interpolate_route(route: &RoutePolyline, spacing: f64) -> Result<RoutePolyline, EdfError> {
    if !(spacing > 0.0) {
        return Err(EdfError::NonPositiveSpacing(spacing));
    }
    let proj = route.projection();
    let pts = route.points();
    let local: Vec<(f64, f64)> = pts.iter().map(|p| proj.forward(p.lat, p.lon)).collect();
    let mut s = vec![0.0];
    for i in 1..local.len() {
        let d = ((local[i].0 - local[i - 1].0).powi(2) + (local[i].1 - local[i - 1].1).powi(2)).sqrt();
        if d == 0.0 {
            return Err(EdfError::DuplicateWaypoint(i - 1, i));
        }
        s.push(s[i - 1] + d);
    }
    let xs: Vec<f64> = local.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = local.iter().map(|p| p.1).collect();
    let mx = natural_spline_moments(&s, &xs);
    let my = natural_spline_moments(&s, &ys);

    let mut out = vec![pts[0]];
    for i in 0..pts.len() - 1 {
        let mut n = ((s[i + 1] - s[i]) / spacing).ceil().max(1.0) as usize;
        let samples = loop {
            let seg: Vec<(f64, f64)> = (1..n)
                .map(|j| {
                    let t = j as f64 / n as f64;
                    (spline_eval(&s, &xs, &mx, i, t), spline_eval(&s, &ys, &my, i, t))
                })
                .collect();
            let mut prev = local[i];
            let mut ok = true;
            for p in seg.iter().chain(std::iter::once(&local[i + 1])) {
                if ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt() > spacing {
                    ok = false;
                    break;
                }
                prev = *p;
            }
            if ok {
                break seg;
            }
            n *= 2;
        };
        for (x, y) in samples {
            let (lat, lon) = proj.inverse(x, y);
            out.push(GeodeticPosition::new(lat, lon, 0.0));
        }
        out.push(pts[i + 1]);
    }
    Ok(RoutePolyline { points: out })
}

/// Lattice definition shared by occupancy grids and cost maps. Cell (r, c)
/// is centered on `(origin_lat + r·res_lat, origin_lon + c·res_lon)` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin_lat_deg: f64,
    pub origin_lon_deg: f64,
    pub res_lat_deg: f64,
    pub res_lon_deg: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    /// Nearest cell of a point, if inside the lattice.
    pub fn cell_of(&self, lat_deg: f64, lon_deg: f64) -> Option<(usize, usize)> {
        let r = ((lat_deg - self.origin_lat_deg) / self.res_lat_deg).round();
        let c = ((lon_deg - self.origin_lon_deg) / self.res_lon_deg).round();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn mean_lat_deg(&self) -> f64 {
        self.origin_lat_deg + 0.5 * (self.rows.saturating_sub(1)) as f64 * self.res_lat_deg
    }

    /// Meters per cell along rows (north) and columns (east) at the mean latitude.
    pub fn meters_per_cell(&self) -> (f64, f64) {
        let proj = LocalProjection::new(self.mean_lat_deg().to_radians(), 0.0);
        (
            self.res_lat_deg.to_radians() * proj.north_scale,
            self.res_lon_deg.to_radians() * proj.east_scale,
        )
    }

    /// Degrees per cell giving roughly `meters` per cell at `lat` (radians).
    pub fn resolution_for(meters: f64, lat: f64) -> (f64, f64) {
        let proj = LocalProjection::new(lat, 0.0);
        (
            (meters / proj.north_scale).to_degrees(),
            (meters / proj.east_scale).to_degrees(),
        )
    }
}

/// Binary occupancy on a [`GridGeometry`] lattice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub geometry: GridGeometry,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Marks every cell containing a route sample. The lattice spans the route
/// extent plus `margin_m` meters on each side.
pub fn rasterize(
    routes: &[RoutePolyline],
    res_lat_deg: f64,
    res_lon_deg: f64,
    margin_m: f64,
) -> Result<OccupancyGrid, EdfError> {
    let all: Vec<&GeodeticPosition> = routes.iter().flat_map(|r| r.points()).collect();
    if all.is_empty() {
        return Err(EdfError::EmptyRoute);
    }
    let lat_min = all.iter().map(|p| p.lat_deg()).fold(f64::INFINITY, f64::min);
    let lat_max = all.iter().map(|p| p.lat_deg()).fold(f64::NEG_INFINITY, f64::max);
    let lon_min = all.iter().map(|p| p.lon_deg()).fold(f64::INFINITY, f64::min);
    let lon_max = all.iter().map(|p| p.lon_deg()).fold(f64::NEG_INFINITY, f64::max);
    let proj = LocalProjection::new(0.5 * (lat_min + lat_max).to_radians(), 0.0);
    let margin_lat = (margin_m / proj.north_scale).to_degrees();
    let margin_lon = (margin_m / proj.east_scale).to_degrees();

    let origin_lat_deg = lat_min - margin_lat;
    let origin_lon_deg = lon_min - margin_lon;
    let rows = ((lat_max + margin_lat - origin_lat_deg) / res_lat_deg).round() as usize + 1;
    let cols = ((lon_max + margin_lon - origin_lon_deg) / res_lon_deg).round() as usize + 1;
    let geometry = GridGeometry {
        origin_lat_deg,
        origin_lon_deg,
        res_lat_deg,
        res_lon_deg,
        rows,
        cols,
    };
    let mut cells = vec![false; rows * cols];
    for p in all {
        if let Some((r, c)) = geometry.cell_of(p.lat_deg(), p.lon_deg()) {
            cells[r * cols + c] = true;
        }
    }
    Ok(OccupancyGrid { geometry, cells })
}

/// One-dimensional squared distance transform under `w²(p − q)² + f(q)`
/// (lower envelope of parabolas). `f` entries of +∞ are unoccupied.
fn squared_dt_1d(f: &[f64], w2: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let vk = v[k as usize];
            let s = ((f[q] + w2 * (q * q) as f64) - (f[vk] + w2 * (vk * vk) as f64))
                / (2.0 * w2 * (q as f64 - vk as f64));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        while z[j + 1] < p as f64 {
            j += 1;
        }
        let d = p as f64 - v[j] as f64;
        *o = w2 * d * d + f[v[j]];
    }
}

/// Exact Euclidean distance transform (Felzenszwalb–Huttenlocher separable
/// passes). Distances to the nearest occupied cell, with `row_spacing` and
/// `col_spacing` giving the physical size of a step along each axis.
pub fn edt(
    cells: &[bool],
    rows: usize,
    cols: usize,
    row_spacing: f64,
    col_spacing: f64,
) -> Result<Vec<f64>, EdfError> {
    if !cells.iter().any(|&c| c) {
        return Err(EdfError::EmptyGrid);
    }
    let mut grid: Vec<f64> = cells
        .iter()
        .map(|&c| if c { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col_in = vec![0.0; rows];
    let mut col_out = vec![0.0; rows];
    for c in 0..cols {
        for r in 0..rows {
            col_in[r] = grid[r * cols + c];
        }
        squared_dt_1d(&col_in, row_spacing * row_spacing, &mut col_out);
        for r in 0..rows {
            grid[r * cols + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; cols];
    for r in 0..rows {
        let row = &grid[r * cols..(r + 1) * cols];
        squared_dt_1d(row, col_spacing * col_spacing, &mut row_out);
        grid[r * cols..(r + 1) * cols].copy_from_slice(&row_out);
    }
    Ok(grid.into_iter().map(f64::sqrt).collect())
}

/// Distance potentials (meters) over a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfCostMap {
    pub geometry: GridGeometry,
    pub data: Vec<f64>,
    pub smoothed: bool,
}

/// Normalized 5×5 Gaussian kernel with σ = 1.
pub fn gaussian_kernel_5x5() -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 2.0, j as f64 - 2.0);
            *v = (-(di * di + dj * dj) / 2.0).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

impl EdfCostMap {
    /// Unsmoothed map: EDT of the occupancy grid converted to meters.
    pub fn from_occupancy(grid: &OccupancyGrid) -> Result<Self, EdfError> {
        let g = grid.geometry;
        let (row_m, col_m) = g.meters_per_cell();
        let data = edt(&grid.cells, g.rows, g.cols, row_m, col_m)?;
        Ok(Self {
            geometry: g,
            data,
            smoothed: false,
        })
    }

    /// Full construction: densify, rasterize, transform, smooth.
    pub fn build(routes: &[RoutePolyline], resolution_m: f64, margin_m: f64) -> Result<Self, EdfError> {
        if routes.is_empty() {
            return Err(EdfError::EmptyRoute);
        }
        let lat = routes.iter().map(|r| r.mean_latitude()).sum::<f64>() / routes.len() as f64;
        let (res_lat, res_lon) = GridGeometry::resolution_for(resolution_m, lat);
        let dense: Vec<RoutePolyline> = routes
            .iter()
            .map(|r| interpolate_route(r, 0.5 * resolution_m))
            .collect::<Result<_, _>>()?;
        let grid = rasterize(&dense, res_lat, res_lon, margin_m)?;
        Self::from_occupancy(&grid)?.smooth()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.geometry.cols + c]
    }

    /// 5×5 Gaussian low-pass (σ = 1) with replicate padding.
    pub fn smooth(&self) -> Result<Self, EdfError> {
        if self.smoothed {
            return Err(EdfError::AlreadySmoothed);
        }
        let k = gaussian_kernel_5x5();
        let (rows, cols) = (self.geometry.rows as isize, self.geometry.cols as isize);
        let mut data = vec![0.0; self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for (i, krow) in k.iter().enumerate() {
                    let rr = (r + i as isize - 2).clamp(0, rows - 1) as usize;
                    for (j, w) in krow.iter().enumerate() {
                        let cc = (c + j as isize - 2).clamp(0, cols - 1) as usize;
                        acc += w * self.data[rr * cols as usize + cc];
                    }
                }
                data[(r * cols + c) as usize] = acc;
            }
        }
        Ok(Self {
            geometry: self.geometry,
            data,
            smoothed: true,
        })
    }

    /// Bilinear cost (m) and its gradient with respect to (lat, lon) in
    /// meters per radian. Points outside the lattice clamp to the border and
    /// the clamped direction gets a zero gradient.
    pub fn sample_cost(&self, p: &GeodeticPosition) -> (f64, [f64; 2]) {
        let g = &self.geometry;
        let (fr, dr_ok) = clamp_axis((p.lat_deg() - g.origin_lat_deg) / g.res_lat_deg, g.rows);
        let (fc, dc_ok) = clamp_axis((p.lon_deg() - g.origin_lon_deg) / g.res_lon_deg, g.cols);
        let (r0, tr) = split_axis(fr, g.rows);
        let (c0, tc) = split_axis(fc, g.cols);
        let r1 = (r0 + 1).min(g.rows - 1);
        let c1 = (c0 + 1).min(g.cols - 1);
        let v00 = self.at(r0, c0);
        let v01 = self.at(r0, c1);
        let v10 = self.at(r1, c0);
        let v11 = self.at(r1, c1);
        let cost = (1.0 - tr) * ((1.0 - tc) * v00 + tc * v01) + tr * ((1.0 - tc) * v10 + tc * v11);
        let d_fr = if dr_ok && r1 != r0 {
            (1.0 - tc) * (v10 - v00) + tc * (v11 - v01)
        } else {
            0.0
        };
        let d_fc = if dc_ok && c1 != c0 {
            (1.0 - tr) * (v01 - v00) + tr * (v11 - v10)
        } else {
            0.0
        };
        let deg = 180.0 / std::f64::consts::PI;
        (cost, [d_fr * deg / g.res_lat_deg, d_fc * deg / g.res_lon_deg])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), EdfError> {
        let g = &self.geometry;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [g.origin_lat_deg, g.origin_lon_deg, g.res_lat_deg, g.res_lon_deg] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(g.rows as u32).to_le_bytes())?;
        w.write_all(&(g.cols as u32).to_le_bytes())?;
        w.write_all(&[u8::from(self.smoothed)])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, EdfError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(EdfError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(EdfError::Format(format!("unsupported version {version}")));
        }
        let mut f = [0.0; 4];
        for v in f.iter_mut() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        if rows == 0 || cols == 0 {
            return Err(EdfError::Format("empty lattice".into()));
        }
        Ok(Self {
            geometry: GridGeometry {
                origin_lat_deg: f[0],
                origin_lon_deg: f[1],
                res_lat_deg: f[2],
                res_lon_deg: f[3],
                rows,
                cols,
            },
            data,
            smoothed: flag[0] != 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EdfError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        let tmp = path.with_extension("edf.tmp");
        std::fs::write(&tmp, buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EdfError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn clamp_axis(f: f64, n: usize) -> (f64, bool) {
    // Degree/radian round trips leave cell centers a few ulps off the lattice.
    let snapped = f.round();
    let f = if (f - snapped).abs() < 1e-9 { snapped } else { f };
    let hi = (n - 1) as f64;
    if f < 0.0 {
        (0.0, false)
    } else if f > hi {
        (hi, false)
    } else {
        (f, true)
    }
}

fn split_axis(f: f64, n: usize) -> (usize, f64) {
    if n < 2 {
        return (0, 0.0);
    }
    let i = (f.floor() as usize).min(n - 2);
    (i, f - i as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_edt(cells: &[bool], rows: usize, cols: usize) -> Vec<f64> {
        let occ: Vec<(usize, usize)> = (0..rows * cols)
            .filter(|&i| cells[i])
            .map(|i| (i / cols, i % cols))
            .collect();
        (0..rows * cols)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                occ.iter()
                    .map(|&(or, oc)| {
                        let dr = r as f64 - or as f64;
                        let dc = c as f64 - oc as f64;
                        dr * dr + dc * dc
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn edt_small_rows() {
        assert_eq!(edt(&[false, true, false], 1, 3, 1.0, 1.0).unwrap(), vec![1.0, 0.0, 1.0]);
        assert_eq!(
            edt(&[true, false, false, false], 1, 4, 1.0, 1.0).unwrap(),
            vec![0.0, 1.0, 2.0, 3.0]
        );
        assert!(matches!(edt(&[false; 4], 2, 2, 1.0, 1.0), Err(EdfError::EmptyGrid)));
    }

    #[test]
    fn edt_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let (rows, cols) = (rng.random_range(1..40), rng.random_range(1..40));
            let density = rng.random_range(0.001..0.3);
            let mut cells: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(density)).collect();
            cells[rng.random_range(0..rows * cols)] = true;
            assert_eq!(
                edt(&cells, rows, cols, 1.0, 1.0).unwrap(),
                brute_force_edt(&cells, rows, cols)
            );
        }
    }

    #[test]
    fn edt_anisotropic_spacing() {
        let mut cells = vec![false; 25];
        cells[12] = true;
        let d = edt(&cells, 5, 5, 2.0, 3.0).unwrap();
        assert_abs_diff_eq!(d[0], (16.0f64 + 36.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(d[2], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[10], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn edt_is_lipschitz_and_zero_on_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (rows, cols) = (30, 30);
        let cells: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.02)).collect();
        let d = edt(&cells, rows, cols, 1.0, 1.0).unwrap();
        for i in 0..rows * cols {
            if cells[i] {
                assert_eq!(d[i], 0.0);
            } else {
                assert!(d[i] > 0.0);
            }
        }
        for _ in 0..2000 {
            let a = rng.random_range(0..rows * cols);
            let b = rng.random_range(0..rows * cols);
            let dr = (a / cols) as f64 - (b / cols) as f64;
            let dc = (a % cols) as f64 - (b % cols) as f64;
            assert!((d[a] - d[b]).abs() <= (dr * dr + dc * dc).sqrt() + 1e-12);
        }
    }

    #[test]
    fn kernel_properties() {
        let k = gaussian_kernel_5x5();
        let sum: f64 = k.iter().flatten().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        assert_eq!(k[2][2], k.iter().flatten().copied().fold(0.0, f64::max));
    }

    fn map_with(data: Vec<f64>, rows: usize, cols: usize) -> EdfCostMap {
        EdfCostMap {
            geometry: GridGeometry {
                origin_lat_deg: 10.0,
                origin_lon_deg: 20.0,
                res_lat_deg: 1e-5,
                res_lon_deg: 2e-5,
                rows,
                cols,
            },
            data,
            smoothed: false,
        }
    }

    #[test]
    fn smoothing_constant_and_impulse() {
        let m = map_with(vec![3.5; 49], 7, 7).smooth().unwrap();
        assert!(m.data.iter().all(|v| (v - 3.5).abs() < 1e-12));
        assert!(matches!(m.smooth(), Err(EdfError::AlreadySmoothed)));

        let mut impulse = vec![0.0; 81];
        impulse[4 * 9 + 4] = 1.0;
        let m = map_with(impulse, 9, 9).smooth().unwrap();
        let k = gaussian_kernel_5x5();
        for r in 0..9 {
            for c in 0..9 {
                let expected = if (2..7).contains(&r) && (2..7).contains(&c) {
                    k[r - 2][c - 2]
                } else {
                    0.0
                };
                assert_abs_diff_eq!(m.at(r, c), expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn bilinear_sampling() {
        let m = map_with((0..20).map(|v| (v * v) as f64).collect(), 4, 5);
        let g = m.geometry;
        let at = |r: f64, c: f64| {
            GeodeticPosition::from_degrees(
                g.origin_lat_deg + r * g.res_lat_deg,
                g.origin_lon_deg + c * g.res_lon_deg,
                0.0,
            )
        };
        let (v, grad) = m.sample_cost(&at(1.0, 2.0));
        assert_abs_diff_eq!(v, m.at(1, 2), epsilon = 1e-9);
        let deg = 180.0 / std::f64::consts::PI;
        assert_abs_diff_eq!(grad[0], (m.at(2, 2) - m.at(1, 2)) * deg / g.res_lat_deg, epsilon = 1e-3);
        assert_abs_diff_eq!(grad[1], (m.at(1, 3) - m.at(1, 2)) * deg / g.res_lon_deg, epsilon = 1e-3);

        let (v, _) = m.sample_cost(&at(1.0, 2.5));
        assert_abs_diff_eq!(v, 0.5 * (m.at(1, 2) + m.at(1, 3)), epsilon = 1e-6);

        // outside: clamps, gradient zero along the clamped axis
        let (v, grad) = m.sample_cost(&at(-3.0, 2.5));
        assert_abs_diff_eq!(v, 0.5 * (m.at(0, 2) + m.at(0, 3)), epsilon = 1e-6);
        assert_eq!(grad[0], 0.0);
        assert!(grad[1] != 0.0);

        let p = at(1.3, 2.7);
        let (_, grad) = m.sample_cost(&p);
        let h = 1e-10;
        let fd_lat = (m.sample_cost(&GeodeticPosition { lat: p.lat + h, ..p }).0
            - m.sample_cost(&GeodeticPosition { lat: p.lat - h, ..p }).0)
            / (2.0 * h);
        let fd_lon = (m.sample_cost(&GeodeticPosition { lon: p.lon + h, ..p }).0
            - m.sample_cost(&GeodeticPosition { lon: p.lon - h, ..p }).0)
            / (2.0 * h);
        assert!((fd_lat - grad[0]).abs() <= 1e-6 * grad[0].abs());
        assert!((fd_lon - grad[1]).abs() <= 1e-6 * grad[1].abs());
    }

    #[test]
    fn route_validation() {
        assert!(matches!(
            RoutePolyline::from_degrees(&[(1.0, 2.0)]),
            Err(EdfError::TooFewWaypoints(1))
        ));
        assert!(matches!(
            RoutePolyline::from_degrees(&[(1.0, 2.0), (1.0, 2.0), (1.1, 2.0)]),
            Err(EdfError::DuplicateWaypoint(0, 1))
        ));
    }

    #[test]
    fn spline_two_points_is_straight() {
        let r = RoutePolyline::from_degrees(&[(22.3, 114.17), (22.301, 114.172)]).unwrap();
        let proj = r.projection();
        let dense = interpolate_route(&r, 5.0).unwrap();
        let len = r.length(&proj);
        assert_eq!(dense.points().len(), (len / 5.0).ceil() as usize + 1);
        for p in dense.points() {
            assert!(r.distance_to(p.lat, p.lon, &proj) < 1e-6);
        }
    }

    #[test]
    fn spline_reproduces_waypoints() {
        let wps = [(22.3, 114.17), (22.3005, 114.1712), (22.3011, 114.1709), (22.3016, 114.1723)];
        let r = RoutePolyline::from_degrees(&wps).unwrap();
        let dense = interpolate_route(&r, 2.0).unwrap();
        let proj = r.projection();
        for (lat, lon) in wps {
            let best = dense
                .points()
                .iter()
                .map(|p| ((p.lat_deg() - lat).abs()).max((p.lon_deg() - lon).abs()))
                .fold(f64::INFINITY, f64::min);
            assert!(best <= 1e-9);
        }
        for w in dense.points().windows(2) {
            let a = proj.forward(w[0].lat, w[0].lon);
            let b = proj.forward(w[1].lat, w[1].lon);
            assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn spline_collinear_samples_stay_collinear() {
        let r = RoutePolyline::from_degrees(&[
            (22.3, 114.17),
            (22.3003, 114.1706),
            (22.3004, 114.1708),
            (22.301, 114.172),
        ])
        .unwrap();
        let dense = interpolate_route(&r, 3.0).unwrap();
        let (a, b) = (r.points()[0], r.points()[3]);
        let (dx, dy) = (b.lon_deg() - a.lon_deg(), b.lat_deg() - a.lat_deg());
        let len = (dx * dx + dy * dy).sqrt();
        for p in dense.points() {
            let cross = ((p.lon_deg() - a.lon_deg()) * dy - (p.lat_deg() - a.lat_deg()) * dx) / len;
            assert!(cross.abs() <= 1e-9, "off-line residual {cross} deg");
        }
    }

    #[test]
    fn rasterize_cases() {
        let (res_lat, res_lon) = (1e-5, 1e-5);
        // both points inside one cell
        let r = RoutePolyline::from_degrees(&[(22.0, 114.0), (22.000001, 114.000001)]).unwrap();
        let g = rasterize(&[r], res_lat, res_lon, 0.0).unwrap();
        assert_eq!(g.occupied_count(), 1);

        // horizontal segment through 5 cell centers
        let pts: Vec<(f64, f64)> = (0..=8).map(|i| (22.0, 114.0 + i as f64 * 0.5 * res_lon)).collect();
        let r = RoutePolyline::from_degrees(&pts).unwrap();
        let g = rasterize(&[r], res_lat, res_lon, 0.0).unwrap();
        assert_eq!(g.geometry.rows, 1);
        assert_eq!(g.occupied_count(), 5);
        assert!(g.cells.iter().all(|&c| c));
    }

    #[test]
    fn rasterize_matches_point_in_cell() {
        let r = RoutePolyline::from_degrees(&[(22.3, 114.17), (22.3004, 114.1712), (22.3011, 114.1709)])
            .unwrap();
        let dense = interpolate_route(&r, 0.5).unwrap();
        let (res_lat, res_lon) = GridGeometry::resolution_for(1.0, r.mean_latitude());
        let g = rasterize(std::slice::from_ref(&dense), res_lat, res_lon, 10.0).unwrap();
        let geo = g.geometry;
        let mut expected = 0;
        for r in 0..geo.rows {
            for c in 0..geo.cols {
                let lat0 = geo.origin_lat_deg + (r as f64 - 0.5) * geo.res_lat_deg;
                let lon0 = geo.origin_lon_deg + (c as f64 - 0.5) * geo.res_lon_deg;
                let hit = dense.points().iter().any(|p| {
                    let (a, b) = (p.lat_deg(), p.lon_deg());
                    a >= lat0 && a < lat0 + geo.res_lat_deg && b >= lon0 && b < lon0 + geo.res_lon_deg
                });
                if hit {
                    expected += 1;
                }
            }
        }
        assert_eq!(g.occupied_count(), expected);
    }

    #[test]
    fn kml_and_csv_parsing() {
        let kml = r#"<?xml version="1.0"?><kml><Document><Placemark><LineString>
            <tessellate>1</tessellate>
            <coordinates>
              114.17,22.3,0 114.171,22.3005,0
              114.172,22.301
            </coordinates></LineString></Placemark></Document></kml>"#;
        let routes = parse_kml(kml).unwrap();
        assert_eq!(routes.len(), 1);
        assert_eq!(routes[0].points().len(), 3);
        assert_abs_diff_eq!(routes[0].points()[1].lat_deg(), 22.3005, epsilon = 1e-12);
        assert_abs_diff_eq!(routes[0].points()[1].lon_deg(), 114.171, epsilon = 1e-12);
        assert!(matches!(parse_kml("<kml></kml>"), Err(EdfError::NoLineString)));

        let csv = "lat_deg,lon_deg\n22.3,114.17\n# comment\n\n22.3005,114.171\n";
        let r = parse_waypoints_csv(csv).unwrap();
        assert_eq!(r.points().len(), 2);
        assert!(parse_waypoints_csv("22.3,114.17\nfoo,bar\n").is_err());
    }

    #[test]
    fn map_file_round_trip() {
        let r = RoutePolyline::from_degrees(&[(22.3, 114.17), (22.3003, 114.1703)]).unwrap();
        let map = EdfCostMap::build(&[r], 1.0, 5.0).unwrap();
        let mut buf = Vec::new();
        map.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = EdfCostMap::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, map);
        buf[0] = b'X';
        assert!(EdfCostMap::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn straight_route_gradient_points_away() {
        let r = RoutePolyline::from_degrees(&[(22.3, 114.17), (22.3, 114.173)]).unwrap();
        let map = EdfCostMap::build(std::slice::from_ref(&r), 1.0, 40.0).unwrap();
        let proj = r.projection();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut good = 0;
        let total = 500;
        for _ in 0..total {
            let east = rng.random_range(20.0..280.0);
            let north = rng.random_range(3.0..35.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (lat, lon) = proj.inverse(east, north);
            let (_, grad) = map.sample_cost(&GeodeticPosition::new(lat, lon, 0.0));
            // convert to a metric gradient (per meter north)
            let g_north = grad[0] / proj.north_scale;
            if g_north * north.signum() > 0.0 {
                good += 1;
            }
        }
        assert!(good as f64 >= 0.99 * total as f64, "{good}/{total}");
    }
}
