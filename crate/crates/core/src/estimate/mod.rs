//! Localization engines: single-epoch WLS, EKF, and moving-horizon
//! estimation (filtering form, with and without arrival cost) on a
//! Gauss-Newton least-squares core.

mod engine;
mod horizon;
mod wls;

use thiserror::Error;

use crate::geo::GeoError;
use crate::linalg::LinalgError;
use crate::model::ModelError;

pub use engine::{
    ekf_predict, ekf_step, ekf_update, gap_check, mhe_filtering, run_trace, EngineConfig,
    EngineKind, Fix, GapDecision, MovingHorizonEstimator, TraceRun,
};
pub use horizon::{
    build_horizon_costs, gauss_newton, mhe_solve, GnOptions, HorizonProblem, MeasurementSet,
    ResidualBlock, ResidualStack, SolveReport,
};
pub use wls::{wls_solve, WlsSolution};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error("need at least 4 visible satellites, got {0}")]
    TooFewSatellites(usize),
    #[error("least squares diverged (update {0:.3e} m)")]
    Diverged(f64),
    #[error("step {step}: {got} corrections for {expected} measurements")]
    CorrectionMismatch {
        step: usize,
        expected: usize,
        got: usize,
    },
    #[error("horizon is malformed: {0}")]
    Malformed(String),
    #[error("warm start is not finite")]
    NonFiniteWarmStart,
    #[error("timestamp {new} does not follow {last}")]
    NonMonotoneTimestamp { last: f64, new: f64 },
    #[error(transparent)]
    Geometry(#[from] GeoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}
