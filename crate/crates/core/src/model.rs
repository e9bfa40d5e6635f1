//! GNSS state-space model: constant-velocity dynamics with a two-state
//! clock, pseudorange / pseudorange-rate measurements, noise covariances and
//! the Riccati recursion that carries the arrival-cost covariance.
//!
//! Measurement vectors are always interleaved `(ρ¹, ρ̇¹, ρ², ρ̇², …)` over the
//! visible satellites of an epoch, in the order they appear in the epoch.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{unit_geometry_vector, EcefPosition, GeoError};
use crate::linalg::{symmetrize, Matrix8, Vector8};

/// Number of satellite slots in the constellation (GPS).
pub const SV: usize = 32;

/// State layout `[x, vx, y, vy, z, vz, clock_offset, clock_drift]`.
pub const STATE_DIM: usize = 8;
pub const IDX_X: usize = 0;
pub const IDX_Y: usize = 2;
pub const IDX_Z: usize = 4;
pub const IDX_CLOCK: usize = 6;
pub const IDX_DRIFT: usize = 7;
/// Position entries of the state, in x, y, z order.
pub const POSITION_IDX: [usize; 3] = [0, 2, 4];
/// Velocity entries of the state, in x, y, z order.
pub const VELOCITY_IDX: [usize; 3] = [1, 3, 5];

/// Default arrival-cost covariance diagonal.
pub const DEFAULT_P0_DIAG: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("sampling interval must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("epoch has no visible satellites")]
    NoVisibleSatellites,
    #[error("geometry: {0}")]
    Geometry(#[from] GeoError),
    #[error("satellite {prn}: sigma must be positive (range {range_sigma}, rate {rate_sigma})")]
    NonPositiveSigma {
        prn: u8,
        range_sigma: f64,
        rate_sigma: f64,
    },
    #[error("innovation covariance is singular")]
    SingularInnovation,
}

/// User state: ECEF position/velocity, clock offset (m) and drift (m/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub Vector8);

impl StateVector {
    pub fn zeros() -> Self {
        Self(Vector8::zeros())
    }

    pub fn from_parts(
        position: &Vector3<f64>,
        velocity: &Vector3<f64>,
        clock_offset: f64,
        clock_drift: f64,
    ) -> Self {
        let mut v = Vector8::zeros();
        for k in 0..3 {
            v[POSITION_IDX[k]] = position[k];
            v[VELOCITY_IDX[k]] = velocity[k];
        }
        v[IDX_CLOCK] = clock_offset;
        v[IDX_DRIFT] = clock_drift;
        Self(v)
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.0[IDX_X], self.0[IDX_Y], self.0[IDX_Z])
    }

    pub fn ecef(&self) -> EcefPosition {
        EcefPosition(self.position())
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.0[1], self.0[3], self.0[5])
    }

    pub fn clock_offset(&self) -> f64 {
        self.0[IDX_CLOCK]
    }

    pub fn clock_drift(&self) -> f64 {
        self.0[IDX_DRIFT]
    }

    pub fn set_position(&mut self, p: &Vector3<f64>) {
        for k in 0..3 {
            self.0[POSITION_IDX[k]] = p[k];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// One satellite's preprocessed ranging measurements at an epoch.
///
/// Pseudoranges are assumed already corrected for satellite clock,
/// atmospheric delays and relativistic effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteObservation {
    pub prn: u8,
    pub sat_position: EcefPosition,
    pub sat_velocity: Vector3<f64>,
    pub pseudorange: f64,
    pub pseudorange_rate: f64,
    /// dB-Hz
    pub cn0: f64,
    pub elevation_deg: f64,
    pub range_sigma: f64,
    pub rate_sigma: f64,
}

impl SatelliteObservation {
    /// Zero-based slot in the fixed-size satellite axis.
    pub fn slot(&self) -> usize {
        usize::from(self.prn).saturating_sub(1)
    }
}

/// Measurements for one timestamp. Only satellites that were tracked (visible)
/// are listed; absence is invisibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub timestamp: f64,
    pub observations: Vec<SatelliteObservation>,
}

impl Epoch {
    pub fn visible_count(&self) -> usize {
        self.observations.len()
    }

    pub fn find(&self, prn: u8) -> Option<&SatelliteObservation> {
        self.observations.iter().find(|o| o.prn == prn)
    }
}

/// Sampling interval from `epochs[k]` to `epochs[k + 1]`.
pub fn sampling_interval(epochs: &[Epoch], k: usize) -> Option<f64> {
    Some(epochs.get(k + 1)?.timestamp - epochs.get(k)?.timestamp)
}

/// White-noise acceleration spectral densities for the two-state blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// m²/s³, applied to each of the x, y, z blocks.
    pub q_pos: f64,
    /// m²/s³, applied to the clock offset/drift block.
    pub q_clock: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            q_pos: 1.0,
            q_clock: 1.0,
        }
    }
}

/// `A(T)`: block diagonal of four `[[1, T], [0, 1]]` blocks.
pub fn dynamics_matrix(dt: f64) -> Result<Matrix8, ModelError> {
    if !(dt > 0.0) {
        return Err(ModelError::NonPositiveInterval(dt));
    }
    let mut a = Matrix8::identity();
    for b in 0..4 {
        a[(2 * b, 2 * b + 1)] = dt;
    }
    Ok(a)
}

/// Zero-noise mean propagation `x' = A(T)·x`.
pub fn propagate(x: &StateVector, dt: f64) -> StateVector {
    let mut v = x.0;
    for b in 0..4 {
        v[2 * b] += dt * v[2 * b + 1];
    }
    StateVector(v)
}

/// `Q(T)`: block diagonal of `q·[[T³/3, T²/2], [T²/2, T]]`.
pub fn process_covariance(dt: f64, noise: &NoiseModel) -> Result<Matrix8, ModelError> {
    if !(dt > 0.0) {
        return Err(ModelError::NonPositiveInterval(dt));
    }
    let mut q = Matrix8::zeros();
    for b in 0..4 {
        let density = if b == 3 { noise.q_clock } else { noise.q_pos };
        let i = 2 * b;
        q[(i, i)] = density * dt.powi(3) / 3.0;
        q[(i, i + 1)] = density * dt * dt / 2.0;
        q[(i + 1, i)] = density * dt * dt / 2.0;
        q[(i + 1, i + 1)] = density * dt;
    }
    Ok(q)
}

/// Predicted `(ρ, ρ̇)` per visible satellite, interleaved.
///
/// The range uses the true geometry of `x`; the rate projects the relative
/// velocity on the line of sight evaluated at `linearization`.
pub fn predict_measurements(
    x: &StateVector,
    linearization: &StateVector,
    observations: &[SatelliteObservation],
) -> Result<DVector<f64>, ModelError> {
    if observations.is_empty() {
        return Err(ModelError::NoVisibleSatellites);
    }
    let user = x.ecef();
    let lin = linearization.ecef();
    let mut out = DVector::zeros(2 * observations.len());
    for (n, obs) in observations.iter().enumerate() {
        let (_, range) = unit_geometry_vector(&user, &obs.sat_position)?;
        let (g, _) = unit_geometry_vector(&lin, &obs.sat_position)?;
        out[2 * n] = range + x.clock_offset();
        out[2 * n + 1] = (x.velocity() - obs.sat_velocity).dot(&g) + x.clock_drift();
    }
    Ok(out)
}

/// `C = ∂h/∂x` at the linearization point, rows interleaved as in
/// [`predict_measurements`].
pub fn measurement_jacobian(
    linearization: &StateVector,
    observations: &[SatelliteObservation],
) -> Result<DMatrix<f64>, ModelError> {
    if observations.is_empty() {
        return Err(ModelError::NoVisibleSatellites);
    }
    let lin = linearization.ecef();
    let mut c = DMatrix::zeros(2 * observations.len(), STATE_DIM);
    for (n, obs) in observations.iter().enumerate() {
        let (g, _) = unit_geometry_vector(&lin, &obs.sat_position)?;
        for k in 0..3 {
            c[(2 * n, POSITION_IDX[k])] = g[k];
            c[(2 * n + 1, VELOCITY_IDX[k])] = g[k];
        }
        c[(2 * n, IDX_CLOCK)] = 1.0;
        c[(2 * n + 1, IDX_DRIFT)] = 1.0;
    }
    Ok(c)
}

/// Interleaved 1-σ values `(σ_ρ¹, σ_ρ̇¹, …)`.
pub fn measurement_sigmas(observations: &[SatelliteObservation]) -> Result<DVector<f64>, ModelError> {
    let mut out = DVector::zeros(2 * observations.len());
    for (n, obs) in observations.iter().enumerate() {
        if !(obs.range_sigma > 0.0) || !(obs.rate_sigma > 0.0) {
            return Err(ModelError::NonPositiveSigma {
                prn: obs.prn,
                range_sigma: obs.range_sigma,
                rate_sigma: obs.rate_sigma,
            });
        }
        out[2 * n] = obs.range_sigma;
        out[2 * n + 1] = obs.rate_sigma;
    }
    Ok(out)
}

pub fn measurement_covariance(
    observations: &[SatelliteObservation],
) -> Result<DMatrix<f64>, ModelError> {
    let s = measurement_sigmas(observations)?;
    Ok(DMatrix::from_diagonal(&s.map(|v| v * v)))
}

/// Discrete filtering Riccati step
/// `P' = Q + A [P − P Cᵀ (C P Cᵀ + R)⁻¹ C P] Aᵀ`, symmetrized.
///
/// A `C` with zero rows is a pure prediction.
pub fn riccati_update(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    let posterior = if c.nrows() == 0 {
        p.clone()
    } else {
        let pct = p * c.transpose();
        let s = symmetrize(&(c * &pct + r));
        let chol = s.cholesky().ok_or(ModelError::SingularInnovation)?;
        let gain_t = chol.solve(&pct.transpose());
        p - &pct * gain_t
    };
    Ok(symmetrize(&(q + a * posterior * a.transpose())))
}

/// [`riccati_update`] specialised to the 8-state GNSS model.
pub fn riccati_update8(
    p: &Matrix8,
    a: &Matrix8,
    c: &DMatrix<f64>,
    q: &Matrix8,
    r: &DMatrix<f64>,
) -> Result<Matrix8, ModelError> {
    let d = |m: &Matrix8| DMatrix::from_column_slice(8, 8, m.as_slice());
    let out = riccati_update(&d(p), &d(a), c, &d(q), r)?;
    Ok(Matrix8::from_column_slice(out.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs_at(sat: Vector3<f64>, vel: Vector3<f64>) -> SatelliteObservation {
        SatelliteObservation {
            prn: 1,
            sat_position: EcefPosition(sat),
            sat_velocity: vel,
            pseudorange: 0.0,
            pseudorange_rate: 0.0,
            cn0: 40.0,
            elevation_deg: 30.0,
            range_sigma: 3.0,
            rate_sigma: 0.5,
        }
    }

    fn random_sky(rng: &mut ChaCha8Rng, user: &Vector3<f64>, count: usize) -> Vec<SatelliteObservation> {
        (0..count)
            .map(|i| {
                let dir = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.2..1.0),
                )
                .normalize();
                let up = user.normalize();
                let dir = (dir + up * 1.5).normalize();
                let mut o = obs_at(
                    user + dir * rng.random_range(2.0e7..2.6e7),
                    Vector3::new(
                        rng.random_range(-3000.0..3000.0),
                        rng.random_range(-3000.0..3000.0),
                        rng.random_range(-3000.0..3000.0),
                    ),
                );
                o.prn = (i + 1) as u8;
                o
            })
            .collect()
    }

    #[test]
    fn dynamics_blocks() {
        let a = dynamics_matrix(1.0).unwrap();
        for b in 0..4 {
            assert_eq!(a[(2 * b, 2 * b)], 1.0);
            assert_eq!(a[(2 * b, 2 * b + 1)], 1.0);
            assert_eq!(a[(2 * b + 1, 2 * b)], 0.0);
            assert_eq!(a[(2 * b + 1, 2 * b + 1)], 1.0);
        }
        assert!((dynamics_matrix(1e-9).unwrap() - Matrix8::identity()).abs().max() <= 1e-9);
        let ab = dynamics_matrix(0.3).unwrap() * dynamics_matrix(1.2).unwrap();
        assert!((ab - dynamics_matrix(1.5).unwrap()).abs().max() < 1e-15);
        assert_eq!(dynamics_matrix(0.0), Err(ModelError::NonPositiveInterval(0.0)));
        assert!(dynamics_matrix(-1.0).is_err());
    }

    #[test]
    fn propagation() {
        let x = StateVector::from_parts(&Vector3::new(1.0, 2.0, 3.0), &Vector3::zeros(), 5.0, 0.0);
        assert_eq!(propagate(&x, 10.0).position(), x.position());

        let x = StateVector::from_parts(&Vector3::zeros(), &Vector3::new(1.0, 0.0, 0.0), 0.0, 0.0);
        assert_eq!(propagate(&x, 2.0).position().x, 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = StateVector(Vector8::from_fn(|_, _| rng.random_range(-100.0..100.0)));
        let dense = dynamics_matrix(0.5).unwrap() * x.0;
        assert!((propagate(&x, 0.5).0 - dense).abs().max() < 1e-12);
    }

    #[test]
    fn prediction_basics() {
        let sat = Vector3::new(1.5e7, 1.0e7, 1.8e7);
        let r = 2.1e7;
        let user = sat + Vector3::new(r, 0.0, 0.0);
        let obs = vec![obs_at(sat, Vector3::zeros())];
        let x = StateVector::from_parts(&user, &Vector3::zeros(), 0.0, 0.0);
        let h = predict_measurements(&x, &x, &obs).unwrap();
        assert_abs_diff_eq!(h[0], r, epsilon = 1e-6);
        assert_abs_diff_eq!(h[1], 0.0, epsilon = 1e-12);

        let shifted = StateVector::from_parts(&user, &Vector3::zeros(), 123.25, 0.0);
        let h2 = predict_measurements(&shifted, &shifted, &obs).unwrap();
        assert_eq!(h2[0] - h[0], 123.25);

        assert_eq!(
            predict_measurements(&x, &x, &[]),
            Err(ModelError::NoVisibleSatellites)
        );
    }

    #[test]
    fn jacobian_structure() {
        let sat = Vector3::new(1.5e7, 1.0e7, 1.8e7);
        let user = sat + Vector3::new(2.0e7, 0.0, 0.0);
        let x = StateVector::from_parts(&user, &Vector3::zeros(), 0.0, 0.0);
        let c = measurement_jacobian(&x, &[obs_at(sat, Vector3::zeros())]).unwrap();
        let row: Vec<f64> = c.row(0).iter().copied().collect();
        assert_eq!(row, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let row: Vec<f64> = c.row(1).iter().copied().collect();
        assert_eq!(row, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

        let coincident = StateVector::from_parts(&sat, &Vector3::zeros(), 0.0, 0.0);
        assert!(matches!(
            measurement_jacobian(&coincident, &[obs_at(sat, Vector3::zeros())]),
            Err(ModelError::Geometry(GeoError::CoincidentPoints))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let user = Vector3::new(-2_418_000.0, 5_386_000.0, 2_405_000.0);
        for count in 1..=12 {
            let obs = random_sky(&mut rng, &user, count);
            let x = StateVector::from_parts(
                &user,
                &Vector3::new(3.0, -1.0, 0.5),
                1234.0,
                0.7,
            );
            let c = measurement_jacobian(&x, &obs).unwrap();
            for k in 0..STATE_DIM {
                let h = 1e-2;
                let mut plus = x;
                let mut minus = x;
                plus.0[k] += h;
                minus.0[k] -= h;
                let fd = (predict_measurements(&plus, &x, &obs).unwrap()
                    - predict_measurements(&minus, &x, &obs).unwrap())
                    / (2.0 * h);
                for r in 0..c.nrows() {
                    let err = (fd[r] - c[(r, k)]).abs();
                    assert!(err <= 1e-5 * c[(r, k)].abs().max(1.0), "row {r} col {k}: {err}");
                }
            }
            for n in 0..count {
                assert_eq!(c[(2 * n, IDX_CLOCK)], 1.0);
            }
        }
    }

    #[test]
    fn prediction_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let user = Vector3::new(-2_418_000.0, 5_386_000.0, 2_405_000.0);
        let obs = random_sky(&mut rng, &user, 7);
        let x = StateVector::from_parts(&user, &Vector3::new(1.0, 2.0, 3.0), 10.0, 0.1);
        let h = predict_measurements(&x, &x, &obs).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let permuted: Vec<_> = perm.iter().map(|&i| obs[i].clone()).collect();
        let hp = predict_measurements(&x, &x, &permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(hp[2 * j], h[2 * i]);
            assert_eq!(hp[2 * j + 1], h[2 * i + 1]);
        }
    }

    #[test]
    fn process_noise_blocks() {
        let q = process_covariance(1.0, &NoiseModel { q_pos: 1.0, q_clock: 1.0 }).unwrap();
        assert_abs_diff_eq!(q[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q[(0, 1)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(q[(1, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(q[(1, 1)], 1.0, epsilon = 1e-15);
        assert_eq!(q[(0, 2)], 0.0);

        let q3 = process_covariance(0.7, &NoiseModel { q_pos: 3.0, q_clock: 3.0 }).unwrap();
        let q1 = process_covariance(0.7, &NoiseModel { q_pos: 1.0, q_clock: 1.0 }).unwrap();
        assert!((q3 - q1 * 3.0).abs().max() < 1e-14);

        for dt in [1e-3, 0.1, 1.0, 30.0] {
            let q = process_covariance(dt, &NoiseModel { q_pos: 2.0, q_clock: 0.5 }).unwrap();
            assert!(q.symmetric_eigenvalues().min() >= -1e-12);
        }
    }

    #[test]
    fn measurement_covariance_layout() {
        let mut o = obs_at(Vector3::new(2e7, 0.0, 0.0), Vector3::zeros());
        o.range_sigma = 3.0;
        o.rate_sigma = 0.5;
        let r = measurement_covariance(std::slice::from_ref(&o)).unwrap();
        assert_eq!(r, DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 0.25])));

        let mut o2 = o.clone();
        o2.range_sigma = 2.0;
        o2.rate_sigma = 0.1;
        let ab = measurement_covariance(&[o.clone(), o2.clone()]).unwrap();
        let ba = measurement_covariance(&[o2.clone(), o.clone()]).unwrap();
        assert_eq!(ab[(0, 0)], ba[(2, 2)]);
        assert_eq!(ab[(3, 3)], ba[(1, 1)]);

        o2.rate_sigma = 0.0;
        assert!(matches!(
            measurement_covariance(&[o2]),
            Err(ModelError::NonPositiveSigma { .. })
        ));
    }

    #[test]
    fn scalar_riccati_closed_form() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let zero = DMatrix::from_element(1, 1, 0.0);
        let mut p = one.clone();
        for k in 1..=50 {
            p = riccati_update(&p, &one, &one, &zero, &one).unwrap();
            assert_abs_diff_eq!(p[(0, 0)], 1.0 / (k as f64 + 1.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn riccati_without_measurements_is_prediction() {
        let a = dynamics_matrix(1.0).unwrap();
        let q = process_covariance(1.0, &NoiseModel::default()).unwrap();
        let p = Matrix8::identity() * 0.05;
        let out = riccati_update8(&p, &a, &DMatrix::zeros(0, 8), &q, &DMatrix::zeros(0, 0)).unwrap();
        assert!((out - (q + a * p * a.transpose())).abs().max() < 1e-14);
    }

    #[test]
    fn riccati_singular_innovation() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let zero = DMatrix::from_element(1, 1, 0.0);
        assert_eq!(
            riccati_update(&zero, &one, &one, &zero, &zero),
            Err(ModelError::SingularInnovation)
        );
    }

    #[test]
    fn stationary_riccati_fixed_point() {
        let los = [
            Vector3::new(0.3, 0.2, 0.93),
            Vector3::new(-0.6, 0.1, 0.79),
            Vector3::new(0.1, -0.7, 0.7),
            Vector3::new(0.8, 0.5, 0.33),
            Vector3::new(-0.2, 0.9, 0.39),
        ];
        let mut c = DMatrix::zeros(2 * los.len(), 8);
        for (n, g) in los.iter().enumerate() {
            let g = g.normalize();
            for k in 0..3 {
                c[(2 * n, POSITION_IDX[k])] = g[k];
                c[(2 * n + 1, VELOCITY_IDX[k])] = g[k];
            }
            c[(2 * n, IDX_CLOCK)] = 1.0;
            c[(2 * n + 1, IDX_DRIFT)] = 1.0;
        }
        let r = DMatrix::from_diagonal(&DVector::from_fn(2 * los.len(), |i, _| {
            if i % 2 == 0 { 25.0 } else { 0.25 }
        }));
        let a = dynamics_matrix(1.0).unwrap();
        let q = process_covariance(1.0, &NoiseModel::default()).unwrap();
        let mut p = Matrix8::identity() * DEFAULT_P0_DIAG;
        for _ in 0..500 {
            p = riccati_update8(&p, &a, &c, &q, &r).unwrap();
        }
        let next = riccati_update8(&p, &a, &c, &q, &r).unwrap();
        assert!((next - p).abs().max() <= 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn riccati_preserves_symmetry_and_psd(
            seed in any::<u64>(),
            m in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
            let p = &g * g.transpose();
            let a = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
            let c = DMatrix::from_fn(m, 8, |_, _| rng.random_range(-1.0..1.0));
            let gq = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-0.5..0.5));
            let q = &gq * gq.transpose();
            let r = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.random_range(0.1..4.0)));
            let out = riccati_update(&p, &a, &c, &q, &r).unwrap();
            prop_assert!((&out - out.transpose()).abs().max() <= 1e-9);
            let scale = out.abs().max().max(1.0);
            prop_assert!(out.symmetric_eigenvalues().min() >= -1e-9 * scale);
        }
    }
}
