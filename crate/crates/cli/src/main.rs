//! `nerc`: simulate traces, train correction networks, evaluate, profile
//! horizons, build EDF maps and serve fixes.

mod config;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nerc_core::bench::{
    emit_labels, emit_trace, evaluate_trace, horizontal_errors, ingest_labels, ingest_trace,
    join_labels, labels_from_sim, profile_horizons, write_atomic, BenchError, EvalReport,
    ProfileRow, RuntimeStats,
};
use nerc_core::edf::{parse_kml, parse_waypoints_csv, EdfCostMap, EdfError, RoutePolyline};
use nerc_core::neural::{Checkpoint, MlpParameters, NeuralError};
use nerc_core::sim::{synthesize_days, SimError, Trajectory};
use nerc_core::train::{train_nerc, TrainError, TrainingTrace};
use nerc_serve::{Service, ServeError};
use serde_json::json;
use thiserror::Error;

use config::NercConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error(transparent)]
    Serve(#[from] ServeError),
}

#[derive(Debug, Parser)]
#[command(name = "nerc", version, about = "Learned GNSS ranging corrections through moving horizon estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; every subcommand reads its own section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the relevant config section.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if needed.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize multi-day traces with truth labels.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a correction network; writes model.json and train_report.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training trace file (repeatable).
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        /// Label file paired with each --trace, in order.
        #[arg(long = "labels")]
        labels: Vec<PathBuf>,
        #[arg(long = "val-trace")]
        val_traces: Vec<PathBuf>,
        #[arg(long = "val-labels")]
        val_labels: Vec<PathBuf>,
        /// EDF map for the map-supervised loss.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Score a predicted track, or run the engine on a trace and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labels: PathBuf,
        /// Predicted track (utc_s, lat_deg, lon_deg[, alt_m]).
        #[arg(long, conflicts_with = "trace")]
        pred: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Forward/backward profile of the engines across horizon sizes.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Build an EDF cost map from route files (waypoint CSV or KML).
    Buildmap {
        #[command(flatten)]
        common: Common,
        #[arg(long = "route", required = true)]
        routes: Vec<PathBuf>,
    },
    /// Serve fixes over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
    },
}

fn prepare(common: &Common) -> Result<NercConfig, CliError> {
    let cfg = NercConfig::load(common.config.as_deref())?;
    fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

fn print(value: serde_json::Value) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(&value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn simulate(common: &Common) -> Result<(), CliError> {
    let mut cfg = prepare(common)?;
    if let Some(seed) = common.seed {
        cfg.simulate.scenario.seed = seed;
    }
    let traces = synthesize_days(&cfg.simulate.scenario, cfg.simulate.days)?;
    let mut files = Vec::new();
    for t in &traces {
        for w in &t.warnings {
            eprintln!("warning: day {}: {w}", t.day);
        }
        let trace = common.out.join(format!("trace_day{}.csv", t.day));
        let labels = common.out.join(format!("labels_day{}.csv", t.day));
        emit_trace(&t.epochs, &trace)?;
        emit_labels(&labels_from_sim(t), &labels)?;
        files.extend([trace, labels]);
    }
    if let Trajectory::Route { waypoints, closed, .. } = &cfg.simulate.scenario.trajectory {
        let mut text = String::from("lat_deg,lon_deg\n");
        let mut pts = waypoints.clone();
        if *closed && pts.first() != pts.last() {
            pts.push(pts[0]);
        }
        for p in pts {
            text.push_str(&format!("{},{}\n", p[0], p[1]));
        }
        let route = common.out.join("route.csv");
        write_atomic(&route, text.as_bytes())?;
        files.push(route);
    }
    print(json!({
        "days": traces.len(),
        "epochs": traces.iter().map(|t| t.epochs.len()).collect::<Vec<_>>(),
        "files": files,
    }))
}

fn load_traces(traces: &[PathBuf], labels: &[PathBuf]) -> Result<Vec<TrainingTrace>, CliError> {
    if !labels.is_empty() && labels.len() != traces.len() {
        return Err(CliError::Usage(format!(
            "{} label files for {} traces",
            labels.len(),
            traces.len()
        )));
    }
    traces
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let epochs = ingest_trace(path)?;
            let joined = match labels.get(i) {
                Some(l) => join_labels(&epochs, &ingest_labels(l)?)?,
                None => vec![None; epochs.len()],
            };
            Ok(TrainingTrace::new(epochs, joined)?)
        })
        .collect()
}

fn train(
    common: &Common,
    traces: &[PathBuf],
    labels: &[PathBuf],
    val_traces: &[PathBuf],
    val_labels: &[PathBuf],
    map: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = prepare(common)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    let train_set = load_traces(traces, labels)?;
    let val_set = load_traces(val_traces, val_labels)?;
    let map = map.map(EdfCostMap::load).transpose()?;
    let (params, report) = train_nerc(&train_set, &val_set, &cfg.train, map.as_ref())?;
    let model = common.out.join("model.json");
    let csv = common.out.join("train_report.csv");
    Checkpoint::new(params, report.config_hash.clone()).save(&model)?;
    write_atomic(&csv, report.to_csv().as_bytes())?;
    let last = report.records.last();
    print(json!({
        "epochs": report.records.len(),
        "final_loss": last.map(|r| r.train_loss),
        "val_rmse": last.and_then(|r| r.val_rmse),
        "warnings": report.warnings.len(),
        "config_hash": report.config_hash,
        "files": [model, csv],
    }))
}

fn load_model(path: Option<&Path>) -> Result<Option<MlpParameters>, CliError> {
    Ok(path.map(Checkpoint::load).transpose()?.map(|c| c.params))
}

fn eval(
    common: &Common,
    labels: &Path,
    pred: Option<&Path>,
    trace: Option<&Path>,
    model: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let label_track = ingest_labels(labels)?;
    let report = match (pred, trace) {
        (Some(p), _) => {
            let errors = horizontal_errors(&ingest_labels(p)?, &label_track)?;
            let runtime = RuntimeStats {
                total_seconds: 0.0,
                mean_epoch_ms: 0.0,
                fixes: errors.len(),
                failures: 0,
                resets: 0,
            };
            EvalReport::from_errors(errors, cfg.engine, runtime)?
        }
        (None, Some(t)) => {
            let epochs = ingest_trace(t)?;
            let params = load_model(model)?;
            let r = evaluate_trace(&epochs, &label_track, params.as_ref(), &cfg.engine)?;
            let track = common.out.join("track.csv");
            emit_labels(&r.track, &track)?;
            r
        }
        (None, None) => return Err(CliError::Usage("eval needs --pred or --trace".into())),
    };
    write_atomic(&common.out.join("eval.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    print(json!({
        "score": report.score,
        "rmse": report.rmse,
        "epochs": report.errors.len(),
        "percentiles": report.percentiles,
    }))
}

fn profile(common: &Common, trace: &Path, labels: &Path) -> Result<(), CliError> {
    let mut cfg = prepare(common)?;
    if let Some(seed) = common.seed {
        cfg.profile.options.seed = seed;
    }
    let epochs = ingest_trace(trace)?;
    let joined = join_labels(&epochs, &ingest_labels(labels)?)?;
    let t = TrainingTrace::new(epochs, joined)?;
    let rows = profile_horizons(&t, &cfg.profile.engines, &cfg.profile.horizons, &cfg.profile.options);
    for r in &rows {
        for e in &r.errors {
            eprintln!("warning: {} N={}: {e}", r.engine.label(), r.horizon);
        }
    }
    let out = common.out.join("profile.csv");
    write_atomic(&out, ProfileRow::to_csv(&rows).as_bytes())?;
    print(json!({ "rows": rows.len(), "files": [out] }))
}

fn read_routes(paths: &[PathBuf]) -> Result<Vec<RoutePolyline>, CliError> {
    let mut routes = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p)?;
        let is_kml = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("kml"));
        if is_kml {
            routes.extend(parse_kml(&text)?);
        } else {
            routes.push(parse_waypoints_csv(&text)?);
        }
    }
    Ok(routes)
}

fn buildmap(common: &Common, routes: &[PathBuf]) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let map = EdfCostMap::build(&read_routes(routes)?, cfg.map.resolution_m, cfg.map.margin_m)?;
    let out = common.out.join("map.edf");
    map.save(&out)?;
    let g = map.geometry;
    print(json!({
        "rows": g.rows,
        "cols": g.cols,
        "resolution_m": cfg.map.resolution_m,
        "files": [out],
    }))
}

fn serve(common: &Common, host: &str, port: u16, model: Option<&Path>, map: Option<&Path>) -> Result<(), CliError> {
    let cfg = NercConfig::load(common.config.as_deref())?;
    let params = load_model(model)?;
    let map = map.map(EdfCostMap::load).transpose()?;
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {host}:{port}: {e}")))?;
    let service = Arc::new(Service::new(cfg.engine, params, map));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(nerc_serve::run(addr, service))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate { common } => simulate(common),
        Command::Train {
            common,
            traces,
            labels,
            val_traces,
            val_labels,
            map,
        } => train(common, traces, labels, val_traces, val_labels, map.as_deref()),
        Command::Eval {
            common,
            labels,
            pred,
            trace,
            model,
        } => eval(common, labels, pred.as_deref(), trace.as_deref(), model.as_deref()),
        Command::Profile { common, trace, labels } => profile(common, trace, labels),
        Command::Buildmap { common, routes } => buildmap(common, routes),
        Command::Serve {
            common,
            port,
            host,
            model,
            map,
        } => serve(common, host, *port, model.as_deref(), map.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
