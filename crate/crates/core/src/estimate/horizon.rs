use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::EstimateError;
use crate::linalg::{whitening_factor8, BlockTridiagonal, Matrix8, Vector8};
use crate::model::{
    dynamics_matrix, measurement_jacobian, measurement_sigmas, predict_measurements, Epoch,
    NoiseModel, SatelliteObservation, StateVector, STATE_DIM,
};

/// Measurements attached to one horizon step.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementSet {
    /// Interleaved pseudorange / rate rows; one correction per satellite,
    /// subtracted from its pseudorange.
    Gnss {
        observations: Vec<SatelliteObservation>,
        corrections: Vec<f64>,
    },
    /// `y − corrections ≈ C x` with diagonal noise `sigma`.
    Linear {
        c: DMatrix<f64>,
        y: DVector<f64>,
        sigma: DVector<f64>,
        corrections: DVector<f64>,
    },
}

impl MeasurementSet {
    pub fn gnss(epoch: &Epoch, corrections: &[f64]) -> Self {
        Self::Gnss {
            observations: epoch.observations.clone(),
            corrections: corrections.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Self::Gnss { observations, .. } => 2 * observations.len(),
            Self::Linear { y, .. } => y.len(),
        }
    }

    pub fn correction_count(&self) -> usize {
        match self {
            Self::Gnss { corrections, .. } => corrections.len(),
            Self::Linear { corrections, .. } => corrections.len(),
        }
    }

    /// Row carrying correction `i`.
    pub fn correction_row(&self, i: usize) -> usize {
        match self {
            Self::Gnss { .. } => 2 * i,
            Self::Linear { .. } => i,
        }
    }

    pub fn correction(&self, i: usize) -> f64 {
        match self {
            Self::Gnss { corrections, .. } => corrections[i],
            Self::Linear { corrections, .. } => corrections[i],
        }
    }

    pub fn set_correction(&mut self, i: usize, value: f64) {
        match self {
            Self::Gnss { corrections, .. } => corrections[i] = value,
            Self::Linear { corrections, .. } => corrections[i] = value,
        }
    }

    pub(crate) fn check(&self, step: usize) -> Result<(), EstimateError> {
        let (expected, got) = match self {
            Self::Gnss {
                observations,
                corrections,
            } => (observations.len(), corrections.len()),
            Self::Linear {
                c,
                y,
                sigma,
                corrections,
            } => {
                if c.nrows() != y.len() || sigma.len() != y.len() || c.ncols() != STATE_DIM {
                    return Err(EstimateError::Malformed(format!(
                        "step {step}: linear measurement shapes disagree"
                    )));
                }
                (y.len(), corrections.len())
            }
        };
        if expected != got {
            return Err(EstimateError::CorrectionMismatch {
                step,
                expected,
                got,
            });
        }
        Ok(())
    }

    /// Unwhitened residual `y − ε − h(x)`, Jacobian of `h` at `x`, and sigmas.
    pub(crate) fn linearize(
        &self,
        x: &StateVector,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>), EstimateError> {
        match self {
            Self::Gnss {
                observations,
                corrections,
            } => {
                let pred = predict_measurements(x, x, observations)?;
                let jac = measurement_jacobian(x, observations)?;
                let sig = measurement_sigmas(observations)?;
                let mut r = DVector::zeros(2 * observations.len());
                for (n, o) in observations.iter().enumerate() {
                    r[2 * n] = o.pseudorange - corrections[n] - pred[2 * n];
                    r[2 * n + 1] = o.pseudorange_rate - pred[2 * n + 1];
                }
                Ok((r, jac, sig))
            }
            Self::Linear {
                c,
                y,
                sigma,
                corrections,
            } => Ok((y - corrections - c * x.0, c.clone(), sigma.clone())),
        }
    }
}

/// An N+1-step estimation window.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonProblem {
    pub measurements: Vec<MeasurementSet>,
    /// Sampling interval from step j to j+1 (N entries).
    pub intervals: Vec<f64>,
    pub prior_state: StateVector,
    pub prior_covariance: Matrix8,
    pub include_arrival_cost: bool,
    pub noise: NoiseModel,
    pub warm_start: Vec<StateVector>,
}

impl HorizonProblem {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    fn validate(&self) -> Result<(), EstimateError> {
        let n = self.measurements.len();
        if n == 0 {
            return Err(EstimateError::Malformed("empty horizon".into()));
        }
        if self.intervals.len() + 1 != n || self.warm_start.len() != n {
            return Err(EstimateError::Malformed(format!(
                "{n} steps, {} intervals, {} warm-start states",
                self.intervals.len(),
                self.warm_start.len()
            )));
        }
        for (j, m) in self.measurements.iter().enumerate() {
            m.check(j)?;
        }
        if self.warm_start.iter().any(|x| !x.is_finite()) {
            return Err(EstimateError::NonFiniteWarmStart);
        }
        Ok(())
    }
}

/// One whitened residual block. `r` is the residual and `d = −∂r/∂x` its
/// sign-flipped Jacobian, so `r(x + Δ) ≈ r − dΔ`.
#[derive(Debug, Clone)]
pub enum ResidualBlock {
    Arrival {
        r: Vector8,
        d: Matrix8,
    },
    Transition {
        step: usize,
        r: Vector8,
        d_prev: Matrix8,
        d_next: Matrix8,
    },
    Measurement {
        step: usize,
        r: DVector<f64>,
        d: DMatrix<f64>,
        /// Square-root weights `1/σ` per row.
        weights: DVector<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ResidualStack {
    pub blocks: Vec<ResidualBlock>,
    pub steps: usize,
}

impl ResidualStack {
    pub fn objective(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| match b {
                ResidualBlock::Arrival { r, .. } => r.norm_squared(),
                ResidualBlock::Transition { r, .. } => r.norm_squared(),
                ResidualBlock::Measurement { r, .. } => r.norm_squared(),
            })
            .sum()
    }

    /// Gauss-Newton normal equations `(DᵀD) Δ = Dᵀr`.
    pub fn normal_equations(&self) -> (BlockTridiagonal, Vec<Vector8>) {
        let mut h = BlockTridiagonal::zeros(self.steps);
        let mut b = vec![Vector8::zeros(); self.steps];
        for block in &self.blocks {
            match block {
                ResidualBlock::Arrival { r, d } => {
                    h.diag[0] += d.transpose() * d;
                    b[0] += d.transpose() * r;
                }
                ResidualBlock::Transition {
                    step,
                    r,
                    d_prev,
                    d_next,
                } => {
                    let j = *step;
                    h.diag[j] += d_prev.transpose() * d_prev;
                    h.diag[j + 1] += d_next.transpose() * d_next;
                    h.upper[j] += d_prev.transpose() * d_next;
                    b[j] += d_prev.transpose() * r;
                    b[j + 1] += d_next.transpose() * r;
                }
                ResidualBlock::Measurement { step, r, d, .. } => {
                    let dt = d.transpose();
                    let hh = &dt * d;
                    let bb = &dt * r;
                    h.diag[*step] += Matrix8::from_iterator(hh.iter().copied());
                    b[*step] += Vector8::from_iterator(bb.iter().copied());
                }
            }
        }
        (h, b)
    }

    /// Dense `(D, r)` with states stacked in step order.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let rows: usize = self
            .blocks
            .iter()
            .map(|b| match b {
                ResidualBlock::Measurement { r, .. } => r.len(),
                _ => STATE_DIM,
            })
            .sum();
        let mut d = DMatrix::zeros(rows, STATE_DIM * self.steps);
        let mut r = DVector::zeros(rows);
        let mut at = 0;
        for block in &self.blocks {
            match block {
                ResidualBlock::Arrival { r: rr, d: dd } => {
                    d.view_mut((at, 0), (8, 8)).copy_from(dd);
                    r.rows_mut(at, 8).copy_from(rr);
                    at += 8;
                }
                ResidualBlock::Transition {
                    step,
                    r: rr,
                    d_prev,
                    d_next,
                } => {
                    d.view_mut((at, 8 * step), (8, 8)).copy_from(d_prev);
                    d.view_mut((at, 8 * (step + 1)), (8, 8)).copy_from(d_next);
                    r.rows_mut(at, 8).copy_from(rr);
                    at += 8;
                }
                ResidualBlock::Measurement { step, r: rr, d: dd, .. } => {
                    d.view_mut((at, 8 * step), (dd.nrows(), 8)).copy_from(dd);
                    r.rows_mut(at, rr.len()).copy_from(rr);
                    at += rr.len();
                }
            }
        }
        (d, r)
    }
}

/// Whitened residuals of the horizon cost at `trajectory`.
pub fn build_horizon_costs(
    p: &HorizonProblem,
    trajectory: &[StateVector],
) -> Result<ResidualStack, EstimateError> {
    let steps = p.measurements.len();
    if trajectory.len() != steps {
        return Err(EstimateError::Malformed(format!(
            "trajectory has {} states for {steps} steps",
            trajectory.len()
        )));
    }
    let mut blocks = Vec::with_capacity(2 * steps + 1);
    if p.include_arrival_cost {
        let l = whitening_factor8(&p.prior_covariance)?;
        blocks.push(ResidualBlock::Arrival {
            r: l * (p.prior_state.0 - trajectory[0].0),
            d: l,
        });
    }
    for (j, &dt) in p.intervals.iter().enumerate() {
        let a = dynamics_matrix(dt)?;
        let l = whitening_factor8(&crate::model::process_covariance(dt, &p.noise)?)?;
        blocks.push(ResidualBlock::Transition {
            step: j,
            r: -(l * (trajectory[j + 1].0 - a * trajectory[j].0)),
            d_prev: -(l * a),
            d_next: l,
        });
    }
    for (j, m) in p.measurements.iter().enumerate() {
        if m.rows() == 0 {
            continue;
        }
        let (r, c, sig) = m.linearize(&trajectory[j])?;
        let w = sig.map(|s| 1.0 / s);
        let mut d = c;
        for (i, mut row) in d.row_iter_mut().enumerate() {
            row *= w[i];
        }
        blocks.push(ResidualBlock::Measurement {
            step: j,
            r: r.component_mul(&w),
            d,
            weights: w,
        });
    }
    Ok(ResidualStack { blocks, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnOptions {
    pub step_size: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for GnOptions {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            max_iters: 10,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub trajectory: Vec<StateVector>,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    /// Objective before the first step and after every step.
    pub history: Vec<f64>,
    /// Norm of the last full Gauss-Newton direction.
    pub final_step_norm: f64,
    /// Number of fixed-size steps that raised the objective.
    pub objective_increases: usize,
}

/// Fixed-step Gauss-Newton: `x ← x + α·Δ` until `|Δ| < tolerance` or the
/// iteration budget is spent. Steps are always applied, even uphill.
pub fn gauss_newton(p: &HorizonProblem, opts: &GnOptions) -> Result<SolveReport, EstimateError> {
    p.validate()?;
    let mut x = p.warm_start.clone();
    let mut stack = build_horizon_costs(p, &x)?;
    let mut history = vec![stack.objective()];
    let mut iterations = 0;
    let mut converged = false;
    let mut final_step_norm = f64::INFINITY;
    let mut objective_increases = 0;
    while iterations < opts.max_iters {
        let (h, b) = stack.normal_equations();
        let delta = h.factor()?.solve(&b)?;
        let norm = delta.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(EstimateError::Diverged(norm));
        }
        for (xi, di) in x.iter_mut().zip(&delta) {
            xi.0 += opts.step_size * di;
        }
        iterations += 1;
        final_step_norm = norm;
        stack = build_horizon_costs(p, &x)?;
        let obj = stack.objective();
        if obj > *history.last().expect("non-empty") {
            objective_increases += 1;
        }
        history.push(obj);
        if norm < opts.tolerance {
            converged = true;
            break;
        }
    }
    Ok(SolveReport {
        objective: *history.last().expect("non-empty"),
        trajectory: x,
        iterations,
        converged,
        history,
        final_step_norm,
        objective_increases,
    })
}

/// Solves the horizon with the inference solver settings.
pub fn mhe_solve(p: &HorizonProblem) -> Result<SolveReport, EstimateError> {
    gauss_newton(p, &GnOptions::default())
}
