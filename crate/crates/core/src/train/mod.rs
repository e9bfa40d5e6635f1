//! Losses, the sequential loader and the end-to-end training loop that
//! backpropagates through the horizon solver into the correction network.

mod adam;
mod loader;
mod loss;

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loader::{horizon_starts, sequential_loader, Batch, Subsequence};
pub use loss::{horizon_loss, loss_2d, loss_3d, loss_edf, Label, LossKind, LossValue, Supervision};

use crate::diff::{mhe_adjoint, AdjointSeed, CorrectionGradient, DiffError};
use crate::edf::EdfCostMap;
use crate::estimate::{
    run_trace, EngineConfig, EngineKind, EstimateError, GnOptions, HorizonProblem,
    MovingHorizonEstimator, SolveReport,
};
use crate::geo::{ecef_to_lla, geodesic_distance, GeodeticPosition, WGS84_A};
use crate::model::{Epoch, NoiseModel, StateVector};
use crate::neural::{
    build_features, config_hash, kaiming_init, mlp_backward, mlp_forward, CorrectionTensor,
    FeatureTensor, MlpGradients, MlpParameters, MlpShape, NeuralError, Normalizer,
};
use crate::sim::Trace;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label missing for a supervised loss")]
    MissingLabel,
    #[error("EDF loss needs a cost map")]
    MissingMap,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no trainable horizons")]
    NoData,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub supervision: Supervision,
    /// Estimator differentiated during training. Moving-horizon engines
    /// only; the filtering engine has no window to differentiate.
    pub estimator: EngineKind,
    /// Training horizon N; windows hold N+1 epochs.
    pub horizon: usize,
    pub batch_size: usize,
    pub subsequence_len: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate once per training epoch.
    pub lr_decay: f64,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub seed: u64,
    pub gn: GnOptions,
    pub noise: NoiseModel,
    /// Largest final GN step (m) at which a horizon is differentiated.
    pub adjoint_tolerance: f64,
    pub mlp: MlpShape,
    pub zero_init_output: bool,
    /// Scale of the radian-valued 2D loss, so its gradients sit on the
    /// same footing as the metric losses.
    pub loss_scale_2d: f64,
    /// Inference engine used for the validation RMSE.
    pub validation: EngineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::ThreeD,
            supervision: Supervision::Horizon,
            estimator: EngineKind::MheNoArrival,
            horizon: 15,
            batch_size: 4,
            subsequence_len: 60,
            learning_rate: 0.01,
            lr_decay: 0.95,
            adam: AdamConfig::default(),
            max_epochs: 20,
            seed: 0,
            gn: GnOptions::default(),
            noise: NoiseModel::default(),
            adjoint_tolerance: 0.05,
            mlp: MlpShape::default(),
            zero_init_output: true,
            loss_scale_2d: WGS84_A * WGS84_A,
            validation: EngineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.horizon >= self.subsequence_len {
            return bad("horizon must be shorter than the subsequence length");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch count must be positive");
        }
        if self.estimator == EngineKind::Ekf || self.estimator == EngineKind::MheFiltering {
            return bad("training needs a moving-horizon estimator");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || !(self.adjoint_tolerance > 0.0) {
            return bad("learning rate, decay and adjoint tolerance must be positive");
        }
        Ok(())
    }

    /// Hash of the serialized config, stored with checkpoints.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).expect("config serializes"))
    }

    fn engine(&self) -> EngineConfig {
        EngineConfig {
            kind: self.estimator,
            horizon: self.horizon,
            noise: self.noise,
            gn: self.gn,
            ..Default::default()
        }
    }
}

/// A time-ordered sequence with per-epoch labels and its raw features.
#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub epochs: Vec<Epoch>,
    pub labels: Vec<Option<Label>>,
    pub features: FeatureTensor,
}

impl TrainingTrace {
    pub fn new(epochs: Vec<Epoch>, labels: Vec<Option<Label>>) -> Result<Self, TrainError> {
        if labels.len() != epochs.len() {
            return Err(TrainError::Shape(format!(
                "{} labels for {} epochs",
                labels.len(),
                epochs.len()
            )));
        }
        let features = build_features(&epochs).tensor;
        Ok(Self {
            epochs,
            labels,
            features,
        })
    }

    /// Labels of the requested kind taken from simulated truth.
    pub fn from_sim(trace: &Trace, kind: LossKind) -> Self {
        let labels = trace
            .truth
            .iter()
            .map(|t| match kind {
                LossKind::ThreeD => Some(Label::Ecef(t.state.ecef())),
                LossKind::TwoD | LossKind::Edf => {
                    let g = t.geodetic();
                    Some(Label::LatLon(g.lat, g.lon))
                }
            })
            .collect();
        Self::new(trace.epochs.clone(), labels).expect("sim truth is aligned")
    }
}

/// Corrections from `params` for a time-ordered epoch sequence.
pub fn predict_corrections(params: &MlpParameters, epochs: &[Epoch]) -> Result<Vec<Vec<f64>>, TrainError> {
    let features = build_features(epochs).tensor;
    let (out, _) = mlp_forward(params, &features)?;
    Ok(epochs
        .iter()
        .enumerate()
        .map(|(k, e)| out.for_epoch(k, e))
        .collect())
}

/// Per-epoch horizontal errors (m) of an engine run against the labels;
/// epochs without a fix or label are skipped.
pub fn horizontal_errors_of(fixes: &[Option<StateVector>], labels: &[Option<Label>]) -> Vec<f64> {
    fixes
        .iter()
        .zip(labels)
        .filter_map(|(f, l)| {
            let (f, l) = (f.as_ref()?, l.as_ref()?);
            let g = ecef_to_lla(&f.ecef());
            let (lat, lon) = l.lat_lon();
            geodesic_distance(&g, &GeodeticPosition::new(lat, lon, 0.0)).ok()
        })
        .collect()
}

pub fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len().max(1) as f64).sqrt()
}

/// Horizontal RMSE of `engine` on `trace`, with network corrections when
/// `params` is given and none otherwise.
pub fn evaluate(
    params: Option<&MlpParameters>,
    trace: &TrainingTrace,
    engine: &EngineConfig,
) -> Result<f64, TrainError> {
    let corrections = match params {
        Some(p) => predict_corrections(p, &trace.epochs)?,
        None => trace
            .epochs
            .iter()
            .map(|e| vec![0.0; e.visible_count()])
            .collect(),
    };
    let run = run_trace(&trace.epochs, &corrections, engine)?;
    Ok(rmse(&horizontal_errors_of(&run.fixes, &trace.labels)))
}

/// Loss of one solved horizon and its gradient with respect to the
/// corrections of every window step. `None` means the horizon is skipped
/// because its solve is not converged enough to differentiate.
pub fn window_gradient(
    problem: &HorizonProblem,
    report: &SolveReport,
    labels: &[Option<Label>],
    cfg: &TrainConfig,
    map: Option<&EdfCostMap>,
) -> Result<Option<(LossValue, CorrectionGradient)>, TrainError> {
    let (value, seed) = horizon_loss(
        cfg.loss,
        cfg.supervision,
        &report.trajectory,
        labels,
        map,
        if cfg.loss == LossKind::TwoD { cfg.loss_scale_2d } else { 1.0 },
    )?;
    match mhe_adjoint(problem, report, &AdjointSeed::new(seed), cfg.adjoint_tolerance) {
        Ok(g) => Ok(Some((value, g))),
        Err(DiffError::NotConverged { .. }) | Err(DiffError::Linalg(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: Option<f64>,
    pub skipped: usize,
    pub horizons: usize,
    pub batches: usize,
    /// Wall time of the epoch's training passes, validation excluded.
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub warnings: Vec<String>,
    pub config_hash: String,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_rmse,skipped_horizons\n");
        for r in &self.records {
            let val = r.val_rmse.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, val, r.skipped);
        }
        s
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

struct SequenceStats {
    loss: f64,
    horizons: usize,
    skipped: usize,
}

/// Forward through the estimator and backward into the network for one
/// subsequence, accumulating parameter gradients of the summed horizon loss.
fn train_sequence(
    params: &MlpParameters,
    trace: &TrainingTrace,
    sub: &Subsequence,
    cfg: &TrainConfig,
    map: Option<&EdfCostMap>,
    grads: &mut MlpGradients,
) -> Result<SequenceStats, TrainError> {
    let features = trace.features.window(sub.start, sub.len);
    let epochs = &trace.epochs[sub.range()];
    let labels = &trace.labels[sub.range()];
    let (out, cache) = mlp_forward(params, &features)?;
    let mut upstream = CorrectionTensor::zeros_like(&features);
    let mut est = MovingHorizonEstimator::new(cfg.engine());
    let mut stats = SequenceStats {
        loss: 0.0,
        horizons: 0,
        skipped: 0,
    };
    let n = cfg.horizon;
    for (i, e) in epochs.iter().enumerate() {
        if est.push(e.clone(), out.for_epoch(i, e)).is_err() {
            if i >= n {
                stats.skipped += 1;
            }
            continue;
        }
        if est.window_len() < n + 1 {
            continue;
        }
        let (problem, report) = est.last_solution().expect("moving-horizon engine");
        let first = i - n;
        match window_gradient(problem, report, &labels[first..=i], cfg, map)? {
            Some((value, g)) => {
                stats.loss += value.total;
                stats.horizons += 1;
                for (j, gj) in g.steps.iter().enumerate() {
                    upstream.accumulate_epoch(first + j, &epochs[first + j], gj);
                }
            }
            None => stats.skipped += 1,
        }
    }
    if stats.horizons > 0 {
        grads.add(&mlp_backward(params, &cache, &upstream)?);
    }
    Ok(stats)
}

/// Trains the correction network end to end. Deterministic for a given
/// config seed.
pub fn train_nerc(
    train: &[TrainingTrace],
    val: &[TrainingTrace],
    cfg: &TrainConfig,
    map: Option<&EdfCostMap>,
) -> Result<(MlpParameters, TrainReport), TrainError> {
    cfg.validate()?;
    if cfg.loss == LossKind::Edf && map.is_none() {
        return Err(TrainError::MissingMap);
    }
    let mut params = kaiming_init(cfg.mlp, cfg.seed, cfg.zero_init_output)?;
    params.normalizer = Normalizer::fit(&train.iter().map(|t| &t.features).collect::<Vec<_>>());
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
    let lengths: Vec<usize> = train.iter().map(|t| t.epochs.len()).collect();
    let mut report = TrainReport {
        records: Vec::new(),
        warnings: Vec::new(),
        config_hash: cfg.hash(),
    };
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        let (batches, warnings) = sequential_loader(&lengths, cfg.subsequence_len, cfg.batch_size, &mut rng);
        for w in warnings {
            log::warn!("{w}");
            report.warnings.push(format!("epoch {epoch}: {w}"));
        }
        let started = Instant::now();
        let (mut loss_sum, mut horizons, mut skipped) = (0.0, 0usize, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let mut grads = MlpGradients::zeros(&params);
            let (mut batch_loss, mut batch_horizons) = (0.0, 0usize);
            for sub in &batch.subsequences {
                let s = train_sequence(&params, &train[sub.trace], sub, cfg, map, &mut grads)?;
                batch_loss += s.loss;
                batch_horizons += s.horizons;
                skipped += s.skipped;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            if batch_horizons == 0 {
                continue;
            }
            grads.scale(1.0 / batch_horizons as f64);
            adam_step(&mut flat, &grads.flatten(), &mut adam, lr, &cfg.adam);
            params.set_flat(&flat)?;
            loss_sum += batch_loss;
            horizons += batch_horizons;
        }
        if horizons == 0 {
            return Err(TrainError::NoData);
        }
        let train_seconds = started.elapsed().as_secs_f64();
        let val_rmse = if val.iter().any(|t| t.labels.iter().any(Option::is_some)) {
            let mut errs = Vec::new();
            for t in val {
                let c = predict_corrections(&params, &t.epochs)?;
                let run = run_trace(&t.epochs, &c, &cfg.validation)?;
                errs.extend(horizontal_errors_of(&run.fixes, &t.labels));
            }
            Some(rmse(&errs))
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / horizons as f64,
            val_rmse,
            skipped,
            horizons,
            batches: batches.len(),
            train_seconds,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val {:?} skipped {skipped}/{}",
            record.train_loss,
            record.val_rmse,
            horizons + skipped
        );
        report.records.push(record);
    }
    Ok((params, report))
}
