use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::edf::EdfCostMap;
use crate::geo::{ecef_to_lla, ecef_to_lla_jacobian, EcefPosition, GeodeticPosition};
use crate::linalg::Vector8;
use crate::model::{StateVector, POSITION_IDX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "2d")]
    TwoD,
    Edf,
}

/// Which states of a horizon the supervised losses penalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Mean over every state of the horizon.
    Horizon,
    Newest,
}

/// Ground truth attached to one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Ecef(EcefPosition),
    /// Latitude and longitude in radians.
    LatLon(f64, f64),
}

impl Label {
    pub fn lat_lon(&self) -> (f64, f64) {
        match self {
            Self::Ecef(p) => {
                let g = ecef_to_lla(p);
                (g.lat, g.lon)
            }
            Self::LatLon(lat, lon) => (*lat, *lon),
        }
    }
}

/// Scalar loss with its per-state breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_step: Vec<f64>,
}

/// `‖p̂ − p‖²` and its gradient with respect to `p̂`.
pub fn loss_3d(pred: &EcefPosition, label: Option<&EcefPosition>) -> Result<(f64, Vector3<f64>), TrainError> {
    let label = label.ok_or(TrainError::MissingLabel)?;
    let d = pred.0 - label.0;
    Ok((d.norm_squared(), 2.0 * d))
}

/// Squared latitude/longitude difference in radians at the geodetic
/// coordinates of `pred`; altitude is left free. The gradient is taken with
/// respect to the ECEF prediction.
pub fn loss_2d(pred: &EcefPosition, label: Option<(f64, f64)>) -> Result<(f64, Vector3<f64>), TrainError> {
    let (lat, lon) = label.ok_or(TrainError::MissingLabel)?;
    let g = ecef_to_lla(pred);
    let dlat = g.lat - lat;
    let dlon = wrap_angle(g.lon - lon);
    let jac = ecef_to_lla_jacobian(pred);
    let grad = (jac.row(0) * (2.0 * dlat) + jac.row(1) * (2.0 * dlon)).transpose();
    Ok((dlat * dlat + dlon * dlon, grad))
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
}

/// Mean map cost of the horizon positions and the gradient per position.
pub fn loss_edf(positions: &[EcefPosition], map: &EdfCostMap) -> (LossValue, Vec<Vector3<f64>>) {
    let n = positions.len() as f64;
    let mut per_step = Vec::with_capacity(positions.len());
    let mut grads = Vec::with_capacity(positions.len());
    for p in positions {
        let g = ecef_to_lla(p);
        let (cost, [dlat, dlon]) = map.sample_cost(&GeodeticPosition::new(g.lat, g.lon, g.alt));
        let jac = ecef_to_lla_jacobian(p);
        per_step.push(cost / n);
        grads.push((jac.row(0) * dlat + jac.row(1) * dlon).transpose() / n);
    }
    (
        LossValue {
            total: per_step.iter().sum(),
            per_step,
        },
        grads,
    )
}

/// Horizon loss and its seed ∂J/∂x̂ for every state.
///
/// `scale` multiplies the supervised losses; the EDF loss is left in meters.
pub fn horizon_loss(
    kind: LossKind,
    supervision: Supervision,
    trajectory: &[StateVector],
    labels: &[Option<Label>],
    map: Option<&EdfCostMap>,
    scale: f64,
) -> Result<(LossValue, Vec<Vector8>), TrainError> {
    let positions: Vec<EcefPosition> = trajectory.iter().map(|x| x.ecef()).collect();
    let mut seed = vec![Vector8::zeros(); trajectory.len()];
    let put = |seed: &mut Vec<Vector8>, j: usize, g: &Vector3<f64>| {
        for k in 0..3 {
            seed[j][POSITION_IDX[k]] += g[k];
        }
    };
    if kind == LossKind::Edf {
        let map = map.ok_or(TrainError::MissingMap)?;
        let (value, grads) = loss_edf(&positions, map);
        for (j, g) in grads.iter().enumerate() {
            put(&mut seed, j, g);
        }
        return Ok((value, seed));
    }
    if labels.len() != trajectory.len() {
        return Err(TrainError::Shape(format!(
            "{} labels for {} states",
            labels.len(),
            trajectory.len()
        )));
    }
    let supervised: Vec<usize> = match supervision {
        Supervision::Horizon => (0..trajectory.len()).collect(),
        Supervision::Newest => vec![trajectory.len() - 1],
    };
    let weight = scale / supervised.len() as f64;
    let mut per_step = vec![0.0; trajectory.len()];
    for &j in &supervised {
        let (v, g) = match kind {
            LossKind::ThreeD => {
                let label = match labels[j] {
                    Some(Label::Ecef(p)) => Some(p),
                    _ => None,
                };
                loss_3d(&positions[j], label.as_ref())?
            }
            _ => loss_2d(&positions[j], labels[j].map(|l| l.lat_lon()))?,
        };
        per_step[j] = v * weight;
        put(&mut seed, j, &(g * weight));
    }
    Ok((
        LossValue {
            total: per_step.iter().sum(),
            per_step,
        },
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::RoutePolyline;
    use crate::geo::lla_to_ecef;

    fn fd_grad(f: impl Fn(&EcefPosition) -> f64, p: &EcefPosition, h: f64) -> Vector3<f64> {
        Vector3::from_fn(|k, _| {
            let mut a = *p;
            let mut b = *p;
            a.0[k] += h;
            b.0[k] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
    }

    #[test]
    fn three_d_values_and_gradient() {
        let label = EcefPosition::new(1.0e6, 2.0e6, 3.0e6);
        assert_eq!(loss_3d(&label, Some(&label)).unwrap().0, 0.0);
        let pred = EcefPosition::new(1.0e6 + 3.0, 2.0e6 + 4.0, 3.0e6);
        let (v, g) = loss_3d(&pred, Some(&label)).unwrap();
        assert!((v - 25.0).abs() < 1e-6);
        let fd = fd_grad(|p| loss_3d(p, Some(&label)).unwrap().0, &pred, 1e-3);
        assert!((g - fd).amax() <= 1e-5);
        assert!(matches!(loss_3d(&pred, None), Err(TrainError::MissingLabel)));
    }

    #[test]
    fn two_d_ignores_altitude() {
        let label = GeodeticPosition::from_degrees(22.3, 114.17, 0.0);
        for alt in [-30.0, 0.0, 55.0, 400.0] {
            let p = lla_to_ecef(&GeodeticPosition::new(label.lat, label.lon, alt));
            assert!(loss_2d(&p, Some((label.lat, label.lon))).unwrap().0 <= 1e-24);
        }
        let pred = lla_to_ecef(&GeodeticPosition::from_degrees(22.3001, 114.1702, 20.0));
        let up = crate::geo::local_axes(&ecef_to_lla(&pred)).2;
        let (v0, g) = loss_2d(&pred, Some((label.lat, label.lon))).unwrap();
        let (v1, _) = loss_2d(&EcefPosition(pred.0 + up * 3.0), Some((label.lat, label.lon))).unwrap();
        assert!((v1 - v0).abs() <= 1e-12);
        assert!(g.dot(&up).abs() <= 1e-9 * g.norm());
    }

    #[test]
    fn two_d_gradient_matches_finite_differences() {
        let label = (22.3f64.to_radians(), 114.17f64.to_radians());
        let pred = lla_to_ecef(&GeodeticPosition::from_degrees(22.3004, 114.1695, 12.0));
        let (_, g) = loss_2d(&pred, Some(label)).unwrap();
        let fd = fd_grad(|p| loss_2d(p, Some(label)).unwrap().0, &pred, 0.5);
        assert!((g - fd).amax() <= 1e-6 * g.amax(), "{g} {fd}");
    }

    fn straight_map() -> EdfCostMap {
        let route = RoutePolyline::from_degrees(&[(22.30, 114.160), (22.30, 114.175)]).unwrap();
        EdfCostMap::build(&[route], 2.0, 60.0).unwrap()
    }

    #[test]
    fn edf_loss_tracks_offset_from_a_straight_route() {
        let map = straight_map();
        let lat0 = 22.30f64.to_radians();
        let north = crate::geo::meridional_radius(lat0);
        for d in [0.0, 10.0, 25.0] {
            let positions: Vec<EcefPosition> = (0..5)
                .map(|i| {
                    let lon = 114.165 + 0.001 * i as f64;
                    lla_to_ecef(&GeodeticPosition::new(lat0 + d / north, lon.to_radians(), 5.0))
                })
                .collect();
            let (v, grads) = loss_edf(&positions, &map);
            if d > 0.0 {
                assert!((v.total - d).abs() <= 2.0, "{d}: {}", v.total);
                let g0 = ecef_to_lla(&positions[0]);
                let north_axis = crate::geo::local_axes(&g0).0;
                // Descent direction points back to the route (south).
                assert!(grads[0].dot(&north_axis) > 0.0);
            }
            let (c, _) = map.sample_cost(&ecef_to_lla(&positions[2]));
            assert!((v.per_step[2] - c / 5.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn edf_loss_on_route_cells_is_the_smoothing_floor() {
        let map = straight_map();
        let geo = &map.geometry;
        let (north_m, _) = geo.meters_per_cell();
        let kernel = crate::edf::gaussian_kernel_5x5();
        let floor: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| kernel[i][j] * (i as f64 - 2.0).abs() * north_m)
            .sum();
        let positions: Vec<EcefPosition> = (0..4)
            .map(|i| {
                let (r, c) = geo.cell_of(22.30, 114.165 + 0.001 * i as f64).unwrap();
                let lat = geo.origin_lat_deg + r as f64 * geo.res_lat_deg;
                let lon = geo.origin_lon_deg + c as f64 * geo.res_lon_deg;
                lla_to_ecef(&GeodeticPosition::from_degrees(lat, lon, 0.0))
            })
            .collect();
        let (v, _) = loss_edf(&positions, &map);
        assert!((v.total - floor).abs() <= 1e-6, "{} vs {floor}", v.total);
        assert!(floor <= 0.75 * north_m);
    }

    #[test]
    fn horizon_seed_is_zero_at_the_label() {
        let truth: Vec<StateVector> = (0..4)
            .map(|i| {
                let p = lla_to_ecef(&GeodeticPosition::from_degrees(22.3, 114.17 + 1e-4 * i as f64, 10.0));
                StateVector::from_parts(&p.0, &Vector3::zeros(), 0.0, 0.0)
            })
            .collect();
        let labels: Vec<Option<Label>> = truth.iter().map(|x| Some(Label::Ecef(x.ecef()))).collect();
        for kind in [LossKind::ThreeD, LossKind::TwoD] {
            let (v, seed) = horizon_loss(kind, Supervision::Horizon, &truth, &labels, None, 1.0).unwrap();
            assert!(v.total <= 1e-20);
            assert!(seed.iter().all(|s| s.amax() <= 1e-9));
        }
        let mut moved = truth.clone();
        moved[3].0[0] += 2.0;
        let (v, seed) = horizon_loss(LossKind::ThreeD, Supervision::Newest, &moved, &labels, None, 1.0).unwrap();
        assert!((v.total - 4.0).abs() < 1e-6);
        assert!((seed[3][0] - 4.0).abs() < 1e-6 && seed[0].amax() == 0.0);
        assert!(matches!(
            horizon_loss(LossKind::Edf, Supervision::Horizon, &moved, &labels, None, 1.0),
            Err(TrainError::MissingMap)
        ));
    }
}
