//! Reverse-mode sensitivities of a converged horizon solve with respect to
//! the pseudorange corrections, by implicit differentiation of the solver's
//! fixed point.

use thiserror::Error;

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::estimate::{
    build_horizon_costs, EstimateError, HorizonProblem, MeasurementSet, ResidualBlock,
    ResidualStack, SolveReport,
};
use crate::geo::{unit_geometry_vector, GeoError};
use crate::linalg::{LinalgError, Vector8};
use crate::model::{StateVector, POSITION_IDX, SV, VELOCITY_IDX};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("solve not converged: last step {step_norm:.3e} above tolerance {tolerance:.3e}")]
    NotConverged { step_norm: f64, tolerance: f64 },
    #[error("seed has {got} states, horizon has {expected}")]
    SeedShape { expected: usize, got: usize },
    #[error("seed is not finite")]
    NonFiniteSeed,
    #[error("finite-difference step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error(transparent)]
    Geometry(#[from] GeoError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Upstream gradient ∂J/∂x̂ for every state of the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSeed {
    pub steps: Vec<Vector8>,
}

impl AdjointSeed {
    pub fn zeros(steps: usize) -> Self {
        Self {
            steps: vec![Vector8::zeros(); steps],
        }
    }

    /// Seed of the scalar `Σ_j w_jᵀ x_j`, i.e. the weights themselves.
    pub fn new(steps: Vec<Vector8>) -> Self {
        Self { steps }
    }

    fn check(&self, expected: usize) -> Result<(), DiffError> {
        if self.steps.len() != expected {
            return Err(DiffError::SeedShape {
                expected,
                got: self.steps.len(),
            });
        }
        if self.steps.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(DiffError::NonFiniteSeed);
        }
        Ok(())
    }
}

/// ∂J/∂ε̂, one entry per correction of each horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionGradient {
    pub steps: Vec<Vec<f64>>,
}

impl CorrectionGradient {
    pub fn zeros_like(p: &HorizonProblem) -> Self {
        Self {
            steps: p
                .measurements
                .iter()
                .map(|m| vec![0.0; m.correction_count()])
                .collect(),
        }
    }

    pub fn amax(&self) -> f64 {
        self.steps
            .iter()
            .flatten()
            .fold(0.0, |m, v| f64::max(m, v.abs()))
    }

    /// `‖self − other‖∞ / ‖other‖∞`.
    pub fn relative_error(&self, reference: &Self) -> f64 {
        let diff = self
            .steps
            .iter()
            .flatten()
            .zip(reference.steps.iter().flatten())
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()));
        diff / reference.amax()
    }

    /// Per-step PRN-slot layout; slots of satellites absent from a step are
    /// exactly zero. Linear measurement sets map correction `i` to slot `i`.
    pub fn to_slots(&self, p: &HorizonProblem) -> Vec<[f64; SV]> {
        self.steps
            .iter()
            .zip(&p.measurements)
            .map(|(g, m)| {
                let mut out = [0.0; SV];
                match m {
                    MeasurementSet::Gnss { observations, .. } => {
                        for (o, v) in observations.iter().zip(g) {
                            out[o.slot()] = *v;
                        }
                    }
                    MeasurementSet::Linear { .. } => {
                        for (i, v) in g.iter().enumerate().take(SV) {
                            out[i] = *v;
                        }
                    }
                }
                out
            })
            .collect()
    }
}

/// Jacobian of the solver's stationarity map `x ↦ D̃(x)ᵀ r(x)`.
///
/// The solver's whitened rows `d̃` use the line-of-sight vector `g` without
/// differentiating it, so the exact map picks up `∂g/∂p = (I − ggᵀ)/ρ`
/// twice: once through the rate predictions inside `r`, once through the
/// rows of `D̃` weighted by their residuals.
fn stationarity_jacobian(
    p: &HorizonProblem,
    stack: &ResidualStack,
    trajectory: &[StateVector],
) -> Result<DMatrix<f64>, DiffError> {
    let (d, _) = stack.to_dense();
    let mut j = d.clone();
    let n = 8 * p.len();
    let mut curvature = DMatrix::zeros(n, n);
    let mut at = 0;
    for block in &stack.blocks {
        match block {
            ResidualBlock::Measurement {
                step, r, weights, ..
            } => {
                if let MeasurementSet::Gnss { observations, .. } = &p.measurements[*step] {
                    let user = trajectory[*step].ecef();
                    let v = trajectory[*step].velocity();
                    for (k, o) in observations.iter().enumerate() {
                        let (g, range) = unit_geometry_vector(&user, &o.sat_position)?;
                        let proj = (Matrix3::identity() - g * g.transpose()) / range;
                        let dg = proj * (v - o.sat_velocity) * weights[2 * k + 1];
                        let range_weight = r[2 * k] * weights[2 * k];
                        let rate_weight = r[2 * k + 1] * weights[2 * k + 1];
                        for a in 0..3 {
                            j[(at + 2 * k + 1, 8 * step + POSITION_IDX[a])] += dg[a];
                            for b in 0..3 {
                                let pb = 8 * step + POSITION_IDX[b];
                                curvature[(8 * step + POSITION_IDX[a], pb)] += proj[(a, b)] * range_weight;
                                curvature[(8 * step + VELOCITY_IDX[a], pb)] += proj[(a, b)] * rate_weight;
                            }
                        }
                    }
                }
                at += r.len();
            }
            _ => at += 8,
        }
    }
    Ok(d.transpose() * j - curvature)
}

/// Implicit derivative of the converged horizon with respect to the
/// corrections, contracted with `seed`.
///
/// At the fixed point `D̃ᵀr = 0` of the solver, `(D̃ᵀJ) dx = D̃ᵀ (∂r/∂ε) dε`
/// to first order, with `D̃` the solver Jacobian and `J` the exact one. The
/// adjoint `λ` solves `(JᵀD̃) λ = seed`, and `∂J/∂ε_n = −w_n (d̃_n · λ)` for
/// the whitened row `d̃_n` carrying correction `n` with weight `w_n`. For
/// linear measurements `J = D̃` and this is the Gauss-Newton normal matrix.
pub fn mhe_adjoint(
    p: &HorizonProblem,
    solution: &SolveReport,
    seed: &AdjointSeed,
    tolerance: f64,
) -> Result<CorrectionGradient, DiffError> {
    if !(solution.final_step_norm <= tolerance) {
        return Err(DiffError::NotConverged {
            step_norm: solution.final_step_norm,
            tolerance,
        });
    }
    seed.check(p.len())?;
    let mut grad = CorrectionGradient::zeros_like(p);
    if seed.steps.iter().all(|s| s.iter().all(|v| *v == 0.0)) {
        return Ok(grad);
    }
    let stack = build_horizon_costs(p, &solution.trajectory)?;
    let lambda = if p.measurements.iter().all(|m| matches!(m, MeasurementSet::Linear { .. })) {
        let (h, _) = stack.normal_equations();
        h.factor()?.solve(&seed.steps)?
    } else {
        let m = stationarity_jacobian(p, &stack, &solution.trajectory)?.transpose();
        let rhs = DVector::from_iterator(8 * p.len(), seed.steps.iter().flat_map(|s| s.iter().copied()));
        let sol = m.lu().solve(&rhs).ok_or(LinalgError::NotPositiveDefinite {
            min_eigenvalue: 0.0,
        })?;
        (0..p.len())
            .map(|j| Vector8::from_iterator(sol.rows(8 * j, 8).iter().copied()))
            .collect()
    };
    for block in &stack.blocks {
        if let ResidualBlock::Measurement {
            step, d, weights, ..
        } = block
        {
            let m = &p.measurements[*step];
            for (i, g) in grad.steps[*step].iter_mut().enumerate() {
                let row = m.correction_row(i);
                let dl: f64 = (0..8).map(|c| d[(row, c)] * lambda[*step][c]).sum();
                *g = -weights[row] * dl;
            }
        }
    }
    Ok(grad)
}

fn seed_dot(seed: &AdjointSeed, trajectory: &[StateVector]) -> f64 {
    seed.steps
        .iter()
        .zip(trajectory)
        .map(|(s, x)| s.dot(&x.0))
        .sum()
}

/// Central differences of `seedᵀ x̂(ε)` over every correction, re-running
/// `solve` for each perturbation.
pub fn finite_diff_gradient<F>(
    solve: F,
    p: &HorizonProblem,
    seed: &AdjointSeed,
    h: f64,
) -> Result<CorrectionGradient, DiffError>
where
    F: Fn(&HorizonProblem) -> Result<SolveReport, EstimateError>,
{
    if !(h > 0.0) {
        return Err(DiffError::NonPositiveStep(h));
    }
    seed.check(p.len())?;
    let mut grad = CorrectionGradient::zeros_like(p);
    let mut q = p.clone();
    for j in 0..p.len() {
        for i in 0..p.measurements[j].correction_count() {
            let base = p.measurements[j].correction(i);
            q.measurements[j].set_correction(i, base + h);
            let plus = seed_dot(seed, &solve(&q)?.trajectory);
            q.measurements[j].set_correction(i, base - h);
            let minus = seed_dot(seed, &solve(&q)?.trajectory);
            q.measurements[j].set_correction(i, base);
            grad.steps[j][i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Evaluates ∂J/∂x̂ with `loss_grad` at the solution and pulls it back to
/// the corrections.
pub fn chain_to_loss<F>(
    p: &HorizonProblem,
    solution: &SolveReport,
    loss_grad: F,
    tolerance: f64,
) -> Result<CorrectionGradient, DiffError>
where
    F: FnOnce(&[StateVector]) -> Vec<Vector8>,
{
    let seed = AdjointSeed::new(loss_grad(&solution.trajectory));
    mhe_adjoint(p, solution, &seed, tolerance)
}
