use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use nerc_core::bench::percentile;
use nerc_core::estimate::run_trace;
use nerc_core::geo::{ecef_to_lla, lla_to_ecef, GeodeticPosition};
use nerc_core::model::Epoch;
use nerc_core::neural::{build_features, kaiming_init, MlpParameters, MlpShape, Normalizer, FEATURES};
use nerc_core::sim::{block_loop, synthesize_trace, ScenarioConfig, Site, Trajectory};
use nerc_core::train::predict_corrections;
use nerc_serve::{router, serve_engine, FixRequest, FixResponse, FixStatus, MetricsSnapshot, Service};
use tower::ServiceExt;

fn trace(seed: u64, duration: f64) -> Vec<Epoch> {
    synthesize_trace(&ScenarioConfig {
        seed,
        duration,
        trajectory: Trajectory::Route {
            waypoints: block_loop(&Site::default(), 250.0, 180.0),
            speed: 7.0,
            closed: true,
        },
        ..Default::default()
    })
    .unwrap()
    .epochs
}

/// A network with non-zero output so corrections actually move the fixes.
fn model(epochs: &[Epoch]) -> MlpParameters {
    let shape = MlpShape {
        input: FEATURES,
        hidden: 12,
        layers: 4,
    };
    let mut p = kaiming_init(shape, 5, false).unwrap();
    p.normalizer = Normalizer::fit(&[&build_features(epochs).tensor]);
    p
}

fn ecef_of(r: &FixResponse) -> nalgebra::Vector3<f64> {
    lla_to_ecef(&GeodeticPosition::from_degrees(
        r.lat_deg.unwrap(),
        r.lon_deg.unwrap(),
        r.alt_m.unwrap(),
    ))
    .0
}

#[test]
fn online_fixes_match_offline_run() {
    let epochs = trace(31, 120.0);
    let params = model(&epochs);
    let offline = {
        let c = predict_corrections(&params, &epochs).unwrap();
        assert!(c.iter().flatten().any(|v| v.abs() > 0.1));
        run_trace(&epochs, &c, &serve_engine()).unwrap()
    };
    let service = Service::new(serve_engine(), Some(params), None);
    let mut worst: f64 = 0.0;
    for (e, off) in epochs.iter().zip(&offline.fixes) {
        let (code, resp) = service.handle(&FixRequest::from_epoch("phone", e));
        assert_eq!(code, StatusCode::OK);
        // Compare in ECEF, after the same geodetic round trip.
        let off = ecef_to_lla(&off.unwrap().ecef());
        let off = lla_to_ecef(&off).0;
        worst = worst.max((ecef_of(&resp) - off).norm());
    }
    assert!(worst <= 1e-6, "online/offline gap {worst:e} m");
}

#[test]
fn interleaved_sessions_match_serial_replay() {
    let a = trace(1, 30.0);
    let b = trace(2, 30.0);
    let serial = |epochs: &[Epoch]| {
        let s = Service::new(serve_engine(), None, None);
        epochs
            .iter()
            .map(|e| s.handle(&FixRequest::from_epoch("x", e)).1)
            .collect::<Vec<_>>()
    };
    let (sa, sb) = (serial(&a), serial(&b));
    let s = Service::new(serve_engine(), None, None);
    let mut ia = Vec::new();
    let mut ib = Vec::new();
    for (ea, eb) in a.iter().zip(&b) {
        ia.push(s.handle(&FixRequest::from_epoch("a", ea)).1);
        ib.push(s.handle(&FixRequest::from_epoch("b", eb)).1);
    }
    let strip = |v: &[FixResponse]| -> Vec<(Option<f64>, Option<f64>, Option<f64>, FixStatus)> {
        v.iter().map(|r| (r.lat_deg, r.lon_deg, r.alt_m, r.status)).collect()
    };
    assert_eq!(strip(&ia), strip(&sa));
    assert_eq!(strip(&ib), strip(&sb));
    assert_eq!(s.metrics().sessions, 2);
}

#[test]
fn concurrent_sessions_stay_isolated() {
    let a = trace(3, 20.0);
    let b = trace(4, 20.0);
    let service = Arc::new(Service::new(serve_engine(), None, None));
    let spawn = |id: &'static str, epochs: Vec<Epoch>| {
        let s = service.clone();
        std::thread::spawn(move || {
            epochs
                .iter()
                .map(|e| s.handle(&FixRequest::from_epoch(id, e)).1.lat_deg)
                .collect::<Vec<_>>()
        })
    };
    let (ha, hb) = (spawn("a", a.clone()), spawn("b", b.clone()));
    let (ra, rb) = (ha.join().unwrap(), hb.join().unwrap());
    let solo = |epochs: &[Epoch]| {
        let s = Service::new(serve_engine(), None, None);
        epochs
            .iter()
            .map(|e| s.handle(&FixRequest::from_epoch("z", e)).1.lat_deg)
            .collect::<Vec<_>>()
    };
    assert_eq!(ra, solo(&a));
    assert_eq!(rb, solo(&b));
}

async fn post(app: &axum::Router, body: String) -> (StatusCode, FixResponse) {
    let req = Request::post("/fix")
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let code = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (code, serde_json::from_slice(&bytes).unwrap())
}

async fn metrics(app: &axum::Router) -> MetricsSnapshot {
    let resp = app
        .clone()
        .oneshot(Request::get("/metrics").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    serde_json::from_slice(&to_bytes(resp.into_body(), usize::MAX).await.unwrap()).unwrap()
}

#[tokio::test]
async fn http_routes_and_metrics() {
    let service = Arc::new(Service::new(serve_engine(), None, None));
    let app = router(service.clone());
    assert_eq!(metrics(&app).await, MetricsSnapshot::default());

    let epochs = trace(9, 12.0);
    let mut statuses = Vec::new();
    for e in &epochs {
        let (code, r) = post(&app, serde_json::to_string(&FixRequest::from_epoch("h", e)).unwrap()).await;
        assert_eq!(code, StatusCode::OK);
        statuses.push(r.status);
    }
    assert_eq!(statuses[0], FixStatus::Warmup);
    assert_eq!(statuses[5], FixStatus::Ok);

    let (code, r) = post(&app, "not json".into()).await;
    assert_eq!((code, r.status), (StatusCode::BAD_REQUEST, FixStatus::Error));
    assert!(r.error.is_some());

    let m = metrics(&app).await;
    assert_eq!(m.requests, epochs.len() as u64 + 1);
    assert_eq!(m.ok + m.warmup, epochs.len() as u64);
    assert_eq!((m.errors, m.resets, m.sessions), (1, 0, 1));
    let log = service.latency_log();
    assert_eq!(m.latency.p50_ms, percentile(&log, 50.0).unwrap());
    assert_eq!(m.latency.p95_ms, percentile(&log, 95.0).unwrap());
    assert_eq!(m.latency.count, log.len());
}

#[test]
fn map_cost_is_reported_when_a_map_is_loaded() {
    use nerc_core::edf::{EdfCostMap, RoutePolyline};
    let wp = block_loop(&Site::default(), 250.0, 180.0);
    let mut pts: Vec<(f64, f64)> = wp.iter().map(|p| (p[0], p[1])).collect();
    pts.push(pts[0]);
    let map = EdfCostMap::build(&[RoutePolyline::from_degrees(&pts).unwrap()], 2.0, 60.0).unwrap();
    let service = Service::new(serve_engine(), None, Some(map));
    let e = &trace(6, 1.0)[0];
    let (_, r) = service.handle(&FixRequest::from_epoch("m", e));
    assert!(r.map_cost_m.unwrap() >= 0.0);
    let plain = Service::new(serve_engine(), None, None);
    let (_, r) = plain.handle(&FixRequest::from_epoch("m", e));
    assert!(r.map_cost_m.is_none());
    assert!(!serde_json::to_string(&r).unwrap().contains("map_cost_m"));
}
