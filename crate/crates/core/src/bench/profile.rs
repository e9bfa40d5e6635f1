use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::estimate::{run_trace, EngineConfig, EngineKind, GnOptions};
use crate::model::NoiseModel;
use crate::neural::{MlpShape, FEATURES};
use crate::train::{horizontal_errors_of, rmse, train_nerc, TrainConfig, TrainingTrace};

pub const PROFILE_HEADER: &str = "engine,horizon,rmse,forward_time,backward_time,train_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileOptions {
    pub noise: NoiseModel,
    pub gn: GnOptions,
    /// Skips the one-epoch training pass when false.
    pub backward: bool,
    pub mlp: MlpShape,
    pub batch_size: usize,
    /// Subsequences are at least this long and always longer than N.
    pub subsequence_len: usize,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            noise: NoiseModel::default(),
            gn: GnOptions::default(),
            backward: true,
            mlp: MlpShape {
                input: FEATURES,
                hidden: 16,
                layers: 3,
            },
            batch_size: 4,
            subsequence_len: 60,
            seed: 0,
        }
    }
}

/// One engine × horizon cell. Times are seconds: forward is the whole
/// trace, backward is the mean per training batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub engine: EngineKind,
    pub horizon: usize,
    pub rmse: Option<f64>,
    pub forward_time: Option<f64>,
    pub backward_time: Option<f64>,
    pub train_loss: Option<f64>,
    pub errors: Vec<String>,
}

impl ProfileRow {
    pub fn to_csv(rows: &[ProfileRow]) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!("{PROFILE_HEADER}\n");
        for r in rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.engine.label(),
                r.horizon,
                cell(r.rmse),
                cell(r.forward_time),
                cell(r.backward_time),
                cell(r.train_loss)
            );
        }
        s
    }
}

/// Forward accuracy and timing of every engine at every horizon, plus the
/// one-epoch training loss and per-batch backward time of the
/// moving-horizon engines. Failures are recorded in the cell.
pub fn profile_horizons(
    trace: &TrainingTrace,
    engines: &[EngineKind],
    horizons: &[usize],
    opts: &ProfileOptions,
) -> Vec<ProfileRow> {
    let zero: Vec<Vec<f64>> = trace.epochs.iter().map(|e| vec![0.0; e.visible_count()]).collect();
    let mut rows = Vec::new();
    for &engine in engines {
        for &n in horizons {
            let mut row = ProfileRow {
                engine,
                horizon: n,
                rmse: None,
                forward_time: None,
                backward_time: None,
                train_loss: None,
                errors: Vec::new(),
            };
            let cfg = EngineConfig {
                kind: engine,
                horizon: n,
                noise: opts.noise,
                gn: opts.gn,
                ..Default::default()
            };
            let started = Instant::now();
            match run_trace(&trace.epochs, &zero, &cfg) {
                Ok(run) => {
                    row.forward_time = Some(started.elapsed().as_secs_f64());
                    row.rmse = Some(rmse(&horizontal_errors_of(&run.fixes, &trace.labels)));
                    row.errors.extend(run.failures.iter().map(|(k, e)| format!("epoch {k}: {e}")));
                }
                Err(e) => row.errors.push(e.to_string()),
            }
            let trainable = matches!(engine, EngineKind::MheArrival | EngineKind::MheNoArrival);
            if opts.backward && trainable {
                let tc = TrainConfig {
                    estimator: engine,
                    horizon: n,
                    subsequence_len: opts.subsequence_len.max(n + 1),
                    batch_size: opts.batch_size,
                    max_epochs: 1,
                    seed: opts.seed,
                    noise: opts.noise,
                    gn: opts.gn,
                    mlp: opts.mlp,
                    ..Default::default()
                };
                match train_nerc(std::slice::from_ref(trace), &[], &tc, None) {
                    Ok((_, report)) => {
                        let rec = &report.records[0];
                        row.train_loss = Some(rec.train_loss);
                        row.backward_time = Some(rec.train_seconds / rec.batches.max(1) as f64);
                    }
                    Err(e) => row.errors.push(e.to_string()),
                }
            }
            rows.push(row);
        }
    }
    rows
}
