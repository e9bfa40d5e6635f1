use nalgebra::{DMatrix, DVector, Matrix4, Vector3, Vector4};

use super::EstimateError;
use crate::geo::{unit_geometry_vector, EcefPosition};
use crate::model::{measurement_sigmas, Epoch, StateVector};

const MAX_ITERS: usize = 20;
const CONVERGED_STEP: f64 = 1e-4;
const DIVERGED_STEP: f64 = 1e7;

#[derive(Debug, Clone, PartialEq)]
pub struct WlsSolution {
    pub state: StateVector,
    /// Corrected pseudorange minus predicted range at the fix, per satellite.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// Single-epoch weighted least squares: Gauss-Newton on position and clock
/// from corrected pseudoranges, then a linear solve for velocity and drift
/// from the rates. `init` defaults to the Earth's center.
pub fn wls_solve(
    epoch: &Epoch,
    corrections: &[f64],
    init: Option<EcefPosition>,
) -> Result<WlsSolution, EstimateError> {
    let obs = &epoch.observations;
    let m = obs.len();
    if m < 4 {
        return Err(EstimateError::TooFewSatellites(m));
    }
    if corrections.len() != m {
        return Err(EstimateError::CorrectionMismatch {
            step: 0,
            expected: m,
            got: corrections.len(),
        });
    }
    let sig = measurement_sigmas(obs)?;
    let mut pos = init.map(|p| p.0).unwrap_or_else(Vector3::zeros);
    let mut clock = 0.0;
    let mut iterations = 0;
    loop {
        let mut h = Matrix4::zeros();
        let mut b = Vector4::zeros();
        for (n, o) in obs.iter().enumerate() {
            let (g, range) = unit_geometry_vector(&EcefPosition(pos), &o.sat_position)?;
            let w = 1.0 / (sig[2 * n] * sig[2 * n]);
            let row = Vector4::new(g.x, g.y, g.z, 1.0);
            let r = o.pseudorange - corrections[n] - range - clock;
            h += row * row.transpose() * w;
            b += row * (r * w);
        }
        let delta = h
            .cholesky()
            .ok_or(EstimateError::TooFewSatellites(m))?
            .solve(&b);
        let step = delta.fixed_rows::<3>(0).norm();
        if !step.is_finite() || step > DIVERGED_STEP {
            return Err(EstimateError::Diverged(step));
        }
        pos += delta.fixed_rows::<3>(0);
        clock += delta[3];
        iterations += 1;
        if step < CONVERGED_STEP || iterations >= MAX_ITERS {
            break;
        }
    }

    let user = EcefPosition(pos);
    let mut residuals = Vec::with_capacity(m);
    let mut a = DMatrix::zeros(m, 4);
    let mut y = DVector::zeros(m);
    for (n, o) in obs.iter().enumerate() {
        let (g, range) = unit_geometry_vector(&user, &o.sat_position)?;
        residuals.push(o.pseudorange - corrections[n] - range - clock);
        let w = 1.0 / sig[2 * n + 1];
        for k in 0..3 {
            a[(n, k)] = g[k] * w;
        }
        a[(n, 3)] = w;
        y[n] = (o.pseudorange_rate + o.sat_velocity.dot(&g)) * w;
    }
    let normal = a.transpose() * &a;
    let vd = normal
        .cholesky()
        .ok_or(EstimateError::TooFewSatellites(m))?
        .solve(&(a.transpose() * y));
    let state = StateVector::from_parts(&pos, &Vector3::new(vd[0], vd[1], vd[2]), clock, vd[3]);
    Ok(WlsSolution {
        state,
        residuals,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{synthesize_trace, ErrorFieldConfig, ScenarioConfig, Trajectory};

    fn noiseless(bias: bool) -> crate::sim::Trace {
        synthesize_trace(&ScenarioConfig {
            duration: 10.0,
            sigma_range: 0.0,
            sigma_rate: 0.0,
            trajectory: Trajectory::ConstantVelocity {
                velocity_enu: [5.0, 2.0, 0.0],
            },
            error_field: ErrorFieldConfig {
                scale: if bias { 1.0 } else { 0.0 },
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn recovers_truth_from_noiseless_epoch() {
        let trace = noiseless(true);
        let corr = trace.true_corrections();
        for (k, e) in trace.epochs.iter().enumerate() {
            let sol = wls_solve(e, &corr[k], None).unwrap();
            let truth = &trace.truth[k].state;
            assert!((sol.state.position() - truth.position()).norm() <= 1e-6);
            assert!((sol.state.clock_offset() - truth.clock_offset()).abs() <= 1e-6);
            assert!((sol.state.velocity() - truth.velocity()).norm() <= 1e-6);
            assert!((sol.state.clock_drift() - truth.clock_drift()).abs() <= 1e-6);
            assert!(sol.residuals.iter().all(|r| r.abs() <= 1e-6));
        }
    }

    #[test]
    fn earth_center_and_truth_init_agree() {
        let trace = noiseless(false);
        let e = &trace.epochs[0];
        let zeros = vec![0.0; e.visible_count()];
        let a = wls_solve(e, &zeros, None).unwrap();
        let b = wls_solve(e, &zeros, Some(trace.truth[0].state.ecef())).unwrap();
        assert!((a.state.position() - b.state.position()).norm() <= 1e-6);
    }

    #[test]
    fn common_range_offset_moves_only_the_clock() {
        let trace = noiseless(false);
        let mut e = trace.epochs[0].clone();
        let zeros = vec![0.0; e.visible_count()];
        let base = wls_solve(&e, &zeros, None).unwrap();
        for o in e.observations.iter_mut() {
            o.pseudorange += 1234.5;
        }
        let shifted = wls_solve(&e, &zeros, None).unwrap();
        let d = (shifted.state.position() - base.state.position()).norm();
        assert!(d <= 1e-6, "{d}");
        assert!((shifted.state.clock_offset() - base.state.clock_offset() - 1234.5).abs() <= 1e-6);
    }

    #[test]
    fn too_few_satellites() {
        let trace = noiseless(false);
        let mut e = trace.epochs[0].clone();
        e.observations.truncate(3);
        assert_eq!(
            wls_solve(&e, &[0.0; 3], None),
            Err(EstimateError::TooFewSatellites(3))
        );
    }
}
