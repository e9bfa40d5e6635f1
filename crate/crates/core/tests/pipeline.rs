//! File-level round trips across simulation, I/O, training and estimation.

use nerc_core::bench::{
    emit_labels, emit_trace, evaluate_trace, ingest_labels, ingest_trace, join_labels,
    labels_from_sim,
};
use nerc_core::edf::{EdfCostMap, RoutePolyline};
use nerc_core::estimate::{run_trace, EngineConfig};
use nerc_core::geo::GeodeticPosition;
use nerc_core::neural::{Checkpoint, MlpShape, FEATURES};
use nerc_core::sim::{block_loop, synthesize_trace, ScenarioConfig, Site, Trace, Trajectory};
use nerc_core::train::{predict_corrections, train_nerc, LossKind, TrainConfig, TrainingTrace};

fn trace(seed: u64, duration: f64) -> Trace {
    synthesize_trace(&ScenarioConfig {
        seed,
        duration,
        trajectory: Trajectory::Route {
            waypoints: block_loop(&Site::default(), 200.0, 120.0),
            speed: 6.0,
            closed: true,
        },
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn files_reproduce_the_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let t = trace(3, 60.0);
    let (tp, lp) = (dir.path().join("t.csv"), dir.path().join("l.csv"));
    emit_trace(&t.epochs, &tp).unwrap();
    emit_labels(&labels_from_sim(&t), &lp).unwrap();

    let epochs = ingest_trace(&tp).unwrap();
    assert_eq!(epochs, t.epochs);
    let engine = EngineConfig::default();
    let direct = run_trace(&t.epochs, &t.zero_corrections(), &engine).unwrap();
    let report = evaluate_trace(&epochs, &ingest_labels(&lp).unwrap(), None, &engine).unwrap();
    assert_eq!(report.errors.len(), 60);
    assert_eq!(report.track.len(), direct.fix_count());

    let joined = join_labels(&epochs, &ingest_labels(&lp).unwrap()).unwrap();
    assert!(joined.iter().all(Option::is_some));
}

#[test]
fn checkpoint_predictions_survive_a_reload() {
    let dir = tempfile::tempdir().unwrap();
    let traces = vec![TrainingTrace::from_sim(&trace(5, 80.0), LossKind::ThreeD)];
    let cfg = TrainConfig {
        mlp: MlpShape {
            input: FEATURES,
            hidden: 8,
            layers: 3,
        },
        horizon: 5,
        subsequence_len: 30,
        max_epochs: 2,
        ..Default::default()
    };
    let (params, report) = train_nerc(&traces, &[], &cfg, None).unwrap();
    assert_eq!(report.records.len(), 2);
    let path = dir.path().join("model.json");
    Checkpoint::new(params.clone(), report.config_hash.clone()).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config_hash, cfg.hash());
    let test = trace(6, 30.0);
    assert_eq!(
        predict_corrections(&loaded.params, &test.epochs).unwrap(),
        predict_corrections(&params, &test.epochs).unwrap()
    );
}

#[test]
fn saved_maps_sample_identically() {
    let dir = tempfile::tempdir().unwrap();
    let wp = block_loop(&Site::default(), 200.0, 120.0);
    let mut pts: Vec<(f64, f64)> = wp.iter().map(|p| (p[0], p[1])).collect();
    pts.push(pts[0]);
    let map = EdfCostMap::build(&[RoutePolyline::from_degrees(&pts).unwrap()], 2.0, 40.0).unwrap();
    let path = dir.path().join("m.edf");
    map.save(&path).unwrap();
    let back = EdfCostMap::load(&path).unwrap();
    assert_eq!(back, map);
    let p = GeodeticPosition::from_degrees(pts[0].0 + 1e-4, pts[0].1 + 2e-4, 0.0);
    assert_eq!(back.sample_cost(&p), map.sample_cost(&p));
    assert!(map.sample_cost(&p).0 > 0.0);
}
