use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::horizon::{gauss_newton, GnOptions, HorizonProblem, MeasurementSet, SolveReport};
use super::wls::wls_solve;
use super::EstimateError;
use crate::linalg::{symmetrize8, Matrix8};
use crate::model::{
    dynamics_matrix, process_covariance, riccati_update8, Epoch, ModelError, NoiseModel,
    StateVector, DEFAULT_P0_DIAG,
};

/// Seconds between consecutive epochs above which the horizon restarts.
pub const DEFAULT_GAP_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Ekf,
    /// Recursive MHE: a single full step on the one-epoch arrival problem.
    #[serde(rename = "mhe_f", alias = "mhe_filtering")]
    MheFiltering,
    #[serde(rename = "mhe_ac", alias = "mhe_arrival")]
    MheArrival,
    /// Sliding-window factor-graph baseline without the prior term.
    #[serde(rename = "mhe_no_ac", alias = "mhe_no_arrival")]
    MheNoArrival,
}

impl EngineKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Ekf => "ekf",
            Self::MheFiltering => "mhe_f",
            Self::MheArrival => "mhe_ac",
            Self::MheNoArrival => "mhe_no_ac",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub kind: EngineKind,
    /// N; windows hold N+1 epochs.
    pub horizon: usize,
    pub noise: NoiseModel,
    pub gn: GnOptions,
    pub p0_diag: f64,
    pub gap_threshold: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            kind: EngineKind::MheArrival,
            horizon: 5,
            noise: NoiseModel::default(),
            gn: GnOptions::default(),
            p0_diag: DEFAULT_P0_DIAG,
            gap_threshold: DEFAULT_GAP_THRESHOLD,
        }
    }
}

impl EngineConfig {
    pub fn with_kind(kind: EngineKind, horizon: usize) -> Self {
        Self {
            kind,
            horizon,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapDecision {
    Keep,
    Reset,
}

/// Horizon continuity rule: strictly more than `threshold` seconds since the
/// last epoch restarts the horizon; non-increasing timestamps are rejected.
pub fn gap_check(last: Option<f64>, new: f64, threshold: f64) -> Result<GapDecision, EstimateError> {
    match last {
        None => Ok(GapDecision::Keep),
        Some(last) if !(new > last) => Err(EstimateError::NonMonotoneTimestamp { last, new }),
        Some(last) if new - last > threshold => Ok(GapDecision::Reset),
        Some(_) => Ok(GapDecision::Keep),
    }
}

pub fn ekf_predict(
    x: &StateVector,
    p: &Matrix8,
    dt: f64,
    noise: &NoiseModel,
) -> Result<(StateVector, Matrix8), EstimateError> {
    let a = dynamics_matrix(dt)?;
    let q = process_covariance(dt, noise)?;
    Ok((StateVector(a * x.0), symmetrize8(&(a * p * a.transpose() + q))))
}

/// Kalman-gain measurement update linearized at the prediction.
pub fn ekf_update(
    x: &StateVector,
    p: &Matrix8,
    epoch: &Epoch,
    corrections: &[f64],
) -> Result<(StateVector, Matrix8), EstimateError> {
    if epoch.observations.is_empty() {
        return Ok((*x, *p));
    }
    if corrections.len() != epoch.observations.len() {
        return Err(EstimateError::CorrectionMismatch {
            step: 0,
            expected: epoch.observations.len(),
            got: corrections.len(),
        });
    }
    ekf_update_set(x, p, &MeasurementSet::gnss(epoch, corrections))
}

fn ekf_update_set(
    x: &StateVector,
    p: &Matrix8,
    meas: &MeasurementSet,
) -> Result<(StateVector, Matrix8), EstimateError> {
    if meas.rows() == 0 {
        return Ok((*x, *p));
    }
    let (innov, c, sig) = meas.linearize(x)?;
    let r = DMatrix::from_diagonal(&sig.map(|v| v * v));
    let pd = DMatrix::from_column_slice(8, 8, p.as_slice());
    let pct = &pd * c.transpose();
    let s = &c * &pct + &r;
    let s = (&s + s.transpose()) * 0.5;
    let chol = s.cholesky().ok_or(ModelError::SingularInnovation)?;
    let k = chol.solve(&pct.transpose()).transpose();
    let dx = &k * innov;
    let mut x_new = *x;
    for i in 0..8 {
        x_new.0[i] += dx[i];
    }
    let ikc = DMatrix::<f64>::identity(8, 8) - &k * &c;
    let joseph = &ikc * &pd * ikc.transpose() + &k * r * k.transpose();
    let p_new = symmetrize8(&Matrix8::from_column_slice(joseph.as_slice()));
    Ok((x_new, p_new))
}

pub fn ekf_step(
    x: &StateVector,
    p: &Matrix8,
    dt: f64,
    epoch: &Epoch,
    corrections: &[f64],
    noise: &NoiseModel,
) -> Result<(StateVector, Matrix8), EstimateError> {
    let (xp, pp) = ekf_predict(x, p, dt, noise)?;
    ekf_update(&xp, &pp, epoch, corrections)
}

#[derive(Debug, Clone)]
struct Entry {
    timestamp: f64,
    meas: MeasurementSet,
    /// Prediction x̂_{j|j−1} (the bootstrap fix at a restart).
    x_pred: StateVector,
    /// Arrival covariance P_j paired with `x_pred`.
    p_prior: Matrix8,
    /// Fix emitted when this epoch was the newest, x̂_{j|j}.
    head: StateVector,
    /// Latest smoothed estimate, reused as the next warm start.
    estimate: StateVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fix {
    pub timestamp: f64,
    pub state: StateVector,
    /// Epochs in the horizon that produced this fix.
    pub window_len: usize,
    /// The gap rule restarted the horizon at this epoch.
    pub reset: bool,
}

/// Streaming estimator shared by offline trace runs, training and serving.
///
/// Each accepted epoch extends the horizon, advances the covariance ring by
/// one Riccati step, solves the window and emits its newest state.
#[derive(Debug, Clone)]
pub struct MovingHorizonEstimator {
    cfg: EngineConfig,
    window: VecDeque<Entry>,
    last_timestamp: Option<f64>,
    ekf_covariance: Matrix8,
    last_solution: Option<(HorizonProblem, SolveReport)>,
}

impl MovingHorizonEstimator {
    pub fn new(cfg: EngineConfig) -> Self {
        Self {
            cfg,
            window: VecDeque::with_capacity(cfg.horizon + 2),
            last_timestamp: None,
            ekf_covariance: Matrix8::identity() * cfg.p0_diag,
            last_solution: None,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn last_timestamp(&self) -> Option<f64> {
        self.last_timestamp
    }

    /// Timestamps currently held in the horizon, oldest first.
    pub fn window_timestamps(&self) -> Vec<f64> {
        self.window.iter().map(|e| e.timestamp).collect()
    }

    /// Horizon problem and solve report behind the most recent fix
    /// (moving-horizon engines only).
    pub fn last_solution(&self) -> Option<&(HorizonProblem, SolveReport)> {
        self.last_solution.as_ref()
    }

    pub fn reset(&mut self) {
        self.window.clear();
        self.last_solution = None;
    }

    pub fn push(&mut self, epoch: Epoch, corrections: Vec<f64>) -> Result<Fix, EstimateError> {
        let meas = MeasurementSet::Gnss {
            observations: epoch.observations,
            corrections,
        };
        self.push_measurements(epoch.timestamp, meas, None)
    }

    /// Accepts any measurement set. A restarted horizon begins at `start`
    /// when given, otherwise at a WLS fix (GNSS measurements only).
    pub fn push_measurements(
        &mut self,
        timestamp: f64,
        meas: MeasurementSet,
        start: Option<StateVector>,
    ) -> Result<Fix, EstimateError> {
        meas.check(0)?;
        let decision = gap_check(self.last_timestamp, timestamp, self.cfg.gap_threshold)?;
        let reset = decision == GapDecision::Reset;
        if reset {
            self.reset();
        }
        let last = self.last_timestamp.replace(timestamp);
        self.last_solution = None;
        match self.advance(timestamp, meas, last, start) {
            Ok(state) => Ok(Fix {
                timestamp,
                state,
                window_len: self.window.len(),
                reset,
            }),
            Err(e) => {
                self.reset();
                Err(e)
            }
        }
    }

    fn advance(
        &mut self,
        timestamp: f64,
        meas: MeasurementSet,
        last: Option<f64>,
        start: Option<StateVector>,
    ) -> Result<StateVector, EstimateError> {
        let (x_pred, p_prior, dt) = match (self.window.back(), last) {
            (Some(prev), Some(last)) => {
                let dt = timestamp - last;
                let a = dynamics_matrix(dt)?;
                let q = process_covariance(dt, &self.cfg.noise)?;
                let (c, r) = if prev.meas.rows() == 0 {
                    (DMatrix::zeros(0, 8), DMatrix::zeros(0, 0))
                } else {
                    let (_, c, sig) = prev.meas.linearize(&prev.x_pred)?;
                    (c, DMatrix::from_diagonal(&sig.map(|v| v * v)))
                };
                let p = riccati_update8(&prev.p_prior, &a, &c, &q, &r)?;
                (StateVector(a * prev.head.0), p, Some(dt))
            }
            _ => {
                let boot = match (start, &meas) {
                    (Some(x), _) => x,
                    (
                        None,
                        MeasurementSet::Gnss {
                            observations,
                            corrections,
                        },
                    ) => {
                        let epoch = Epoch {
                            timestamp,
                            observations: observations.clone(),
                        };
                        wls_solve(&epoch, corrections, None)?.state
                    }
                    (None, MeasurementSet::Linear { .. }) => {
                        return Err(EstimateError::Malformed(
                            "linear measurements need a starting state".into(),
                        ))
                    }
                };
                let p0 = Matrix8::identity() * self.cfg.p0_diag;
                self.ekf_covariance = p0;
                (boot, p0, None)
            }
        };
        self.window.push_back(Entry {
            timestamp,
            meas,
            x_pred,
            p_prior,
            head: x_pred,
            estimate: x_pred,
        });
        while self.window.len() > self.cfg.horizon + 1 {
            self.window.pop_front();
        }

        let head = match self.cfg.kind {
            EngineKind::Ekf => {
                let prev = self.window.len().checked_sub(2).map(|i| self.window[i].head);
                let newest = self.window.back().expect("just pushed");
                let (x, p) = match (prev, dt) {
                    (Some(prev), Some(dt)) => {
                        let (xp, pp) = ekf_predict(&prev, &self.ekf_covariance, dt, &self.cfg.noise)?;
                        ekf_update_set(&xp, &pp, &newest.meas)?
                    }
                    _ => ekf_update_set(&x_pred, &p_prior, &newest.meas)?,
                };
                self.ekf_covariance = p;
                x
            }
            EngineKind::MheFiltering => {
                let newest = self.window.back().expect("just pushed");
                let problem = HorizonProblem {
                    measurements: vec![newest.meas.clone()],
                    intervals: vec![],
                    prior_state: newest.x_pred,
                    prior_covariance: newest.p_prior,
                    include_arrival_cost: true,
                    noise: self.cfg.noise,
                    warm_start: vec![newest.x_pred],
                };
                let report = gauss_newton(
                    &problem,
                    &GnOptions {
                        step_size: 1.0,
                        max_iters: 1,
                        tolerance: 0.0,
                    },
                )?;
                let x = *report.trajectory.last().expect("one state");
                self.last_solution = Some((problem, report));
                x
            }
            EngineKind::MheArrival | EngineKind::MheNoArrival => {
                let problem = self.window_problem();
                let report = gauss_newton(&problem, &self.cfg.gn)?;
                for (entry, x) in self.window.iter_mut().zip(&report.trajectory) {
                    entry.estimate = *x;
                }
                let x = *report.trajectory.last().expect("non-empty window");
                self.last_solution = Some((problem, report));
                x
            }
        };
        if !head.is_finite() {
            return Err(EstimateError::Diverged(f64::NAN));
        }
        let newest = self.window.back_mut().expect("just pushed");
        newest.head = head;
        newest.estimate = head;
        Ok(head)
    }

    fn window_problem(&self) -> HorizonProblem {
        let front = self.window.front().expect("non-empty window");
        HorizonProblem {
            measurements: self
                .window
                .iter()
                .map(|e| e.meas.clone())
                .collect(),
            intervals: self
                .window
                .iter()
                .zip(self.window.iter().skip(1))
                .map(|(a, b)| b.timestamp - a.timestamp)
                .collect(),
            prior_state: front.x_pred,
            prior_covariance: front.p_prior,
            include_arrival_cost: self.cfg.kind == EngineKind::MheArrival,
            noise: self.cfg.noise,
            warm_start: self.window.iter().map(|e| e.estimate).collect(),
        }
    }
}

/// Output of an offline run: one optional fix per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRun {
    pub fixes: Vec<Option<StateVector>>,
    pub failures: Vec<(usize, String)>,
    /// Epoch indices where the gap rule restarted the horizon.
    pub resets: Vec<usize>,
}

impl TraceRun {
    pub fn fix_count(&self) -> usize {
        self.fixes.iter().filter(|f| f.is_some()).count()
    }
}

/// Runs an engine over a time-ordered trace. Per-epoch failures are recorded
/// and the estimator restarts from WLS at the next epoch.
pub fn run_trace(
    epochs: &[Epoch],
    corrections: &[Vec<f64>],
    cfg: &EngineConfig,
) -> Result<TraceRun, EstimateError> {
    if corrections.len() != epochs.len() {
        return Err(EstimateError::Malformed(format!(
            "{} correction rows for {} epochs",
            corrections.len(),
            epochs.len()
        )));
    }
    let mut est = MovingHorizonEstimator::new(*cfg);
    let mut run = TraceRun {
        fixes: Vec::with_capacity(epochs.len()),
        failures: Vec::new(),
        resets: Vec::new(),
    };
    for (k, (e, c)) in epochs.iter().zip(corrections).enumerate() {
        match est.push(e.clone(), c.clone()) {
            Ok(fix) => {
                if fix.reset {
                    run.resets.push(k);
                }
                run.fixes.push(Some(fix.state));
            }
            Err(err) => {
                log::debug!("epoch {k}: {err}");
                run.failures.push((k, err.to_string()));
                run.fixes.push(None);
            }
        }
    }
    Ok(run)
}

/// Recursive MHE over a trace; `horizon` is accepted for interface parity
/// and has no effect on the output.
pub fn mhe_filtering(
    epochs: &[Epoch],
    corrections: &[Vec<f64>],
    noise: NoiseModel,
    horizon: usize,
) -> Result<TraceRun, EstimateError> {
    run_trace(
        epochs,
        corrections,
        &EngineConfig {
            kind: EngineKind::MheFiltering,
            horizon,
            noise,
            ..Default::default()
        },
    )
}
