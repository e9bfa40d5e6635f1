//! Per-client inference state.

use nerc_core::estimate::{EngineConfig, Fix, MovingHorizonEstimator};
use nerc_core::model::Epoch;
use nerc_core::neural::{mlp_forward, FeatureBuilder, FeatureTensor, MlpParameters};

use crate::ServeError;

/// Horizon cache, estimator state and feature history of one client.
#[derive(Debug, Clone)]
pub struct ClientSession {
    estimator: MovingHorizonEstimator,
    features: FeatureBuilder,
    last_fix: Option<Fix>,
}

impl ClientSession {
    pub fn new(engine: EngineConfig) -> Self {
        Self {
            estimator: MovingHorizonEstimator::new(engine),
            features: FeatureBuilder::new(),
            last_fix: None,
        }
    }

    /// Epochs currently cached in the horizon.
    pub fn cache_len(&self) -> usize {
        self.estimator.window_len()
    }

    pub fn cache_timestamps(&self) -> Vec<f64> {
        self.estimator.window_timestamps()
    }

    pub fn last_fix(&self) -> Option<&Fix> {
        self.last_fix.as_ref()
    }

    /// Runs one epoch through features, network and estimator. Rejected
    /// epochs leave the session untouched; estimator failures clear the
    /// horizon.
    pub fn step(&mut self, epoch: Epoch, model: Option<&MlpParameters>) -> Result<Fix, ServeError> {
        if let Some(last) = self.estimator.last_timestamp() {
            if !(epoch.timestamp > last) {
                return Err(ServeError::NonMonotone {
                    last,
                    new: epoch.timestamp,
                });
            }
        }
        let corrections = correct(&mut self.features, &epoch, model)?;
        let fix = self.estimator.push(epoch, corrections)?;
        self.last_fix = Some(fix.clone());
        Ok(fix)
    }
}

/// Network corrections for one epoch; zeros without a model or when no
/// baseline fix exists for the features.
fn correct(
    features: &mut FeatureBuilder,
    epoch: &Epoch,
    model: Option<&MlpParameters>,
) -> Result<Vec<f64>, ServeError> {
    let rows = features.push(epoch);
    let (Some(model), Some((_, rows))) = (model, rows) else {
        return Ok(vec![0.0; epoch.visible_count()]);
    };
    let mut tensor = FeatureTensor::zeros(1, 1);
    for (slot, v) in rows {
        let i = tensor.slot_index(0, slot);
        tensor.mask[i] = true;
        tensor.values[i] = v;
    }
    let (out, _) = mlp_forward(model, &tensor)?;
    Ok(out.for_epoch(0, epoch))
}
