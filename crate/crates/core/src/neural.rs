//! Satellite-wise correction network: per-satellite features, a plain ReLU
//! MLP applied independently to every visible slot, and its checkpoints.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimate::wls_solve;
use crate::geo::{ecef_to_lla, ecef_vector_to_ned, unit_geometry_vector};
use crate::model::{propagate, Epoch, StateVector, SV};

/// Scalars per satellite slot.
pub const FEATURES: usize = 14;
/// Speeds below this leave the heading feature at zero.
pub const MIN_HEADING_SPEED: f64 = 0.1;
const CHECKPOINT_FORMAT: &str = "nerc-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("feature tensor has {got} slots, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },
    #[error("network needs at least 2 layers, got {0}")]
    TooShallow(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-slot inputs for `batch × steps` epochs, each with [`SV`] slots.
/// Masked slots hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub batch: usize,
    pub steps: usize,
    pub values: Vec<[f64; FEATURES]>,
    pub mask: Vec<bool>,
}

impl FeatureTensor {
    pub fn zeros(batch: usize, steps: usize) -> Self {
        let n = batch * steps * SV;
        Self {
            batch,
            steps,
            values: vec![[0.0; FEATURES]; n],
            mask: vec![false; n],
        }
    }

    pub fn epochs(&self) -> usize {
        self.batch * self.steps
    }

    pub fn slot_index(&self, epoch: usize, slot: usize) -> usize {
        epoch * SV + slot
    }

    pub fn visible(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Epochs `start..start + len` of a single-sequence tensor.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let (a, b) = (start * SV, (start + len) * SV);
        Self {
            batch: 1,
            steps: len,
            values: self.values[a..b].to_vec(),
            mask: self.mask[a..b].to_vec(),
        }
    }

    /// Concatenates sequences of equal length along the batch axis.
    pub fn stack(parts: &[FeatureTensor]) -> Result<Self, NeuralError> {
        let steps = parts.first().map_or(0, |p| p.steps);
        let mut out = Self {
            batch: 0,
            steps,
            values: Vec::new(),
            mask: Vec::new(),
        };
        for p in parts {
            if p.steps != steps {
                return Err(NeuralError::Shape {
                    expected: steps,
                    got: p.steps,
                });
            }
            out.batch += p.batch;
            out.values.extend_from_slice(&p.values);
            out.mask.extend_from_slice(&p.mask);
        }
        Ok(out)
    }
}

/// Network output per slot, zero where masked.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionTensor {
    pub batch: usize,
    pub steps: usize,
    pub values: Vec<f64>,
}

impl CorrectionTensor {
    pub fn zeros(batch: usize, steps: usize) -> Self {
        Self {
            batch,
            steps,
            values: vec![0.0; batch * steps * SV],
        }
    }

    pub fn zeros_like(f: &FeatureTensor) -> Self {
        Self::zeros(f.batch, f.steps)
    }

    /// Corrections for one epoch in the order of its observations.
    pub fn for_epoch(&self, epoch_index: usize, epoch: &Epoch) -> Vec<f64> {
        epoch
            .observations
            .iter()
            .map(|o| self.values[epoch_index * SV + o.slot()])
            .collect()
    }

    /// Adds per-observation values of one epoch into their slots.
    pub fn accumulate_epoch(&mut self, epoch_index: usize, epoch: &Epoch, values: &[f64]) {
        for (o, v) in epoch.observations.iter().zip(values) {
            self.values[epoch_index * SV + o.slot()] += v;
        }
    }
}

/// Baseline per-epoch fixes used to derive the features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBuild {
    pub tensor: FeatureTensor,
    pub baseline: Vec<Option<StateVector>>,
    /// Epochs with no baseline fix; their slots are zeroed and masked.
    pub flagged: Vec<usize>,
}

/// Streaming feature extraction: one epoch at a time, carrying the last
/// baseline fix for epochs where WLS fails.
#[derive(Debug, Clone, Default)]
pub struct FeatureBuilder {
    last: Option<(f64, StateVector)>,
}

impl FeatureBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.last = None;
    }

    /// Baseline fix and `(slot, raw features)` for each usable satellite;
    /// `None` when no baseline is available.
    pub fn push(&mut self, e: &Epoch) -> Option<(StateVector, Vec<(usize, [f64; FEATURES])>)> {
        let zeros = vec![0.0; e.visible_count()];
        let fix = match wls_solve(e, &zeros, None) {
            Ok(sol) => Some(sol.state),
            Err(_) => self.last.map(|(t, x)| propagate(&x, e.timestamp - t)),
        }?;
        self.last = Some((e.timestamp, fix));
        let user = fix.ecef();
        let lla = ecef_to_lla(&user);
        let vel = fix.velocity();
        let heading = if vel.norm() < MIN_HEADING_SPEED {
            [0.0; 3]
        } else {
            ecef_vector_to_ned(&(vel / vel.norm()), &lla).as_array()
        };
        let mut rows = Vec::with_capacity(e.visible_count());
        for o in &e.observations {
            let Ok((g, range)) = unit_geometry_vector(&user, &o.sat_position) else {
                continue;
            };
            let resid = o.pseudorange - range - fix.clock_offset();
            rows.push((o, ecef_vector_to_ned(&g, &lla).as_array(), resid));
        }
        let rss = rows.iter().map(|(_, _, r)| r * r).sum::<f64>().sqrt();
        let features = rows
            .into_iter()
            .map(|(o, g, resid)| {
                (
                    o.slot(),
                    [
                        o.cn0,
                        o.elevation_deg,
                        f64::from(o.prn) / SV as f64,
                        lla.lat,
                        lla.lon,
                        lla.alt,
                        g[0],
                        g[1],
                        g[2],
                        heading[0],
                        heading[1],
                        heading[2],
                        resid,
                        rss,
                    ],
                )
            })
            .collect();
        Some((fix, features))
    }
}

/// Raw (unnormalized) features for one time-ordered sequence of epochs.
pub fn build_features(epochs: &[Epoch]) -> FeatureBuild {
    let mut tensor = FeatureTensor::zeros(1, epochs.len());
    let mut baseline = Vec::with_capacity(epochs.len());
    let mut flagged = Vec::new();
    let mut builder = FeatureBuilder::new();
    for (k, e) in epochs.iter().enumerate() {
        let Some((fix, rows)) = builder.push(e) else {
            flagged.push(k);
            baseline.push(None);
            continue;
        };
        baseline.push(Some(fix));
        for (slot, v) in rows {
            let i = tensor.slot_index(k, slot);
            tensor.mask[i] = true;
            tensor.values[i] = v;
        }
    }
    FeatureBuild {
        tensor,
        baseline,
        flagged,
    }
}

/// Mask-aware z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            mean: [0.0; FEATURES],
            std: [1.0; FEATURES],
        }
    }
}

impl Normalizer {
    /// Statistics over visible slots only; near-constant features keep unit
    /// scale.
    pub fn fit(tensors: &[&FeatureTensor]) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; FEATURES];
        let mut sq = [0.0; FEATURES];
        for t in tensors {
            for (v, m) in t.values.iter().zip(&t.mask) {
                if *m {
                    n += 1;
                    for i in 0..FEATURES {
                        sum[i] += v[i];
                    }
                }
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mut mean = [0.0; FEATURES];
        for i in 0..FEATURES {
            mean[i] = sum[i] / n as f64;
        }
        for t in tensors {
            for (v, m) in t.values.iter().zip(&t.mask) {
                if *m {
                    for i in 0..FEATURES {
                        sq[i] += (v[i] - mean[i]).powi(2);
                    }
                }
            }
        }
        let mut std = [1.0; FEATURES];
        for i in 0..FEATURES {
            let s = (sq[i] / n as f64).sqrt();
            if s > 1e-9 {
                std[i] = s;
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, v: &[f64; FEATURES]) -> [f64; FEATURES] {
        let mut out = [0.0; FEATURES];
        for i in 0..FEATURES {
            out[i] = (v[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    /// Number of affine layers, input and output layers included.
    pub layers: usize,
}

impl Default for MlpShape {
    fn default() -> Self {
        Self {
            input: FEATURES,
            hidden: 20,
            layers: 40,
        }
    }
}

impl MlpShape {
    fn dims(&self, layer: usize) -> (usize, usize) {
        let fan_in = if layer == 0 { self.input } else { self.hidden };
        let fan_out = if layer + 1 == self.layers { 1 } else { self.hidden };
        (fan_out, fan_in)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_out × fan_in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParameters {
    pub shape: MlpShape,
    pub layers: Vec<Layer>,
    pub normalizer: Normalizer,
}

/// Weights drawn from N(0, 2/fan_in), zero biases. With `zero_output` the
/// last layer starts at zero so initial corrections vanish.
pub fn kaiming_init(shape: MlpShape, seed: u64, zero_output: bool) -> Result<MlpParameters, NeuralError> {
    if shape.layers < 2 {
        return Err(NeuralError::TooShallow(shape.layers));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..shape.layers)
        .map(|l| {
            let (out, inp) = shape.dims(l);
            let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("positive std");
            let weights = if zero_output && l + 1 == shape.layers {
                DMatrix::zeros(out, inp)
            } else {
                DMatrix::from_fn(out, inp, |_, _| normal.sample(&mut rng))
            };
            Layer {
                weights,
                bias: DVector::zeros(out),
            }
        })
        .collect();
    Ok(MlpParameters {
        shape,
        layers,
        normalizer: Normalizer::default(),
    })
}

/// Activations of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    steps: usize,
    /// Tensor slot of each column.
    columns: Vec<usize>,
    /// Input to every layer (normalized features first).
    inputs: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<Layer>,
}

impl MlpGradients {
    pub fn zeros(params: &MlpParameters) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer {
                    weights: DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights *= s;
            l.bias *= s;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect()
}

impl MlpParameters {
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Column-major weights then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.parameter_count() {
            return Err(NeuralError::Shape {
                expected: self.parameter_count(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn validate(&self) -> Result<(), NeuralError> {
        if self.layers.len() != self.shape.layers || self.layers.len() < 2 {
            return Err(NeuralError::Layer {
                layer: self.layers.len(),
                msg: format!("expected {} layers", self.shape.layers),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (out, inp) = self.shape.dims(l);
            if layer.weights.shape() != (out, inp) || layer.bias.len() != out {
                return Err(NeuralError::Layer {
                    layer: l,
                    msg: format!("expected {out}×{inp} weights"),
                });
            }
        }
        if self.shape.input != FEATURES {
            return Err(NeuralError::Layer {
                layer: 0,
                msg: format!("input width {} differs from {FEATURES} features", self.shape.input),
            });
        }
        Ok(())
    }
}

fn relu_in_place(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = v.max(0.0));
}

/// Applies the network to every visible slot; masked slots output zero.
pub fn mlp_forward(
    params: &MlpParameters,
    features: &FeatureTensor,
) -> Result<(CorrectionTensor, ForwardCache), NeuralError> {
    params.validate()?;
    let slots = features.epochs() * SV;
    if features.values.len() != slots || features.mask.len() != slots {
        return Err(NeuralError::Shape {
            expected: slots,
            got: features.values.len(),
        });
    }
    let columns: Vec<usize> = (0..slots).filter(|&i| features.mask[i]).collect();
    let mut x = DMatrix::zeros(FEATURES, columns.len());
    for (c, &i) in columns.iter().enumerate() {
        let z = params.normalizer.apply(&features.values[i]);
        for f in 0..FEATURES {
            x[(f, c)] = z[f];
        }
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = &layer.weights * &x;
        for mut col in z.column_iter_mut() {
            col += &layer.bias;
        }
        if l < last {
            relu_in_place(&mut z);
        }
        inputs.push(x);
        x = z;
    }
    let mut out = CorrectionTensor::zeros_like(features);
    for (c, &i) in columns.iter().enumerate() {
        out.values[i] = x[(0, c)];
    }
    Ok((
        out,
        ForwardCache {
            batch: features.batch,
            steps: features.steps,
            columns,
            inputs,
        },
    ))
}

/// Reverse pass of [`mlp_forward`] for an upstream gradient on the outputs.
/// Gradient entries at masked slots are ignored.
pub fn mlp_backward(
    params: &MlpParameters,
    cache: &ForwardCache,
    grad: &CorrectionTensor,
) -> Result<MlpGradients, NeuralError> {
    if grad.batch != cache.batch || grad.steps != cache.steps {
        return Err(NeuralError::Shape {
            expected: cache.batch * cache.steps * SV,
            got: grad.values.len(),
        });
    }
    let mut out = MlpGradients::zeros(params);
    let mut g = DMatrix::from_iterator(
        1,
        cache.columns.len(),
        cache.columns.iter().map(|&i| grad.values[i]),
    );
    for l in (0..params.layers.len()).rev() {
        let input = &cache.inputs[l];
        out.layers[l].weights = &g * input.transpose();
        out.layers[l].bias = g.column_sum();
        if l == 0 {
            break;
        }
        let mut back = params.layers[l].weights.transpose() * &g;
        // The layer input is post-ReLU, so a zero entry marks an inactive unit.
        back.zip_apply(input, |b, a| {
            if a <= 0.0 {
                *b = 0.0;
            }
        });
        g = back;
    }
    Ok(out)
}

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_hash(config_text: &str) -> String {
    hex::encode(Sha256::digest(config_text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub params: MlpParameters,
}

impl Checkpoint {
    pub fn new(params: MlpParameters, config_hash: String) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let ck: Self = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NeuralError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        ck.params.validate()?;
        if !ck.params.is_finite() {
            return Err(NeuralError::Checkpoint("non-finite parameters".into()));
        }
        Ok(ck)
    }
}
