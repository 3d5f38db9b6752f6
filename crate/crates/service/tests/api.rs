use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::{tempdir, TempDir};
use tower::ServiceExt;
use trainscope::correlation::{build_grid, GridParams};
use trainscope::ingest::{ingest_run, IngestOptions};
use trainscope::synthgen::{generate_run, LayerConfig, Plant, SynthConfig};
use trainscope_service::{export_report, router, AppState, QueryParams, ReportFormat, ReportKind};

fn fixture() -> (TempDir, Arc<AppState>) {
    let tmp = tempdir().unwrap();
    let layer = |filters| LayerConfig {
        filters,
        weights_per_filter: 9,
    };
    let mut config = SynthConfig::new(3, vec![layer(16), layer(32), layer(8)], 20, 10, 24);
    config.plants = vec![
        Plant::DeadFilter { layer: 0, filter: 4 },
        Plant::FlipEvent {
            class: 3,
            dump: 10,
            fraction: 0.8,
            pre_stable: 5,
            post_stable: 5,
        },
        Plant::FlipEvent {
            class: 7,
            dump: 10,
            fraction: 1.0,
            pre_stable: 5,
            post_stable: 5,
        },
        Plant::FilterShock {
            layer: 1,
            filters: vec![1, 2],
            dump: 10,
            magnitude: 1.0,
        },
    ];
    generate_run(&config, &tmp.path().join("run")).unwrap();
    let (store, _) = ingest_run(&tmp.path().join("run"), &tmp.path().join("store"), &IngestOptions::default()).unwrap();
    (tmp, AppState::new(store))
}

async fn get(state: &Arc<AppState>, uri: &str) -> (StatusCode, Value) {
    let resp = router(state.clone())
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn run_and_hierarchy() {
    let (_tmp, state) = fixture();
    let (status, run) = get(&state, "/api/v1/run").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(run["dumps"], 24);
    assert_eq!(run["classes"], 20);
    assert_eq!(run["total_filters"], 56);
    let (_, h) = get(&state, "/api/v1/hierarchy").await;
    let nodes = h.as_array().unwrap();
    assert_eq!(nodes.len(), 4);
    assert_eq!(nodes[0]["kind"], "model");
    assert_eq!(nodes[2]["parent"], "model");
    assert_eq!(nodes[2]["filter_count"], 32);
}

#[tokio::test]
async fn unknown_ids_are_404_with_body() {
    let (_tmp, state) = fixture();
    for uri in [
        "/api/v1/classes/9999",
        "/api/v1/classes/9999/images",
        "/api/v1/layers/nope/stats",
        "/api/v1/layers/nope/filters",
        "/api/v1/topfilters?iter=7",
        "/api/v1/classes?cluster=9",
    ] {
        let (status, body) = get(&state, uri).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["status"], 404);
        assert!(body["error"].as_str().unwrap().len() > 3);
    }
}

#[tokio::test]
async fn bad_parameters_are_400() {
    let (_tmp, state) = fixture();
    for uri in [
        "/api/v1/anomalies?k=0",
        "/api/v1/anomalies?min_fraction=2",
        "/api/v1/correlation?top_k=0",
        "/api/v1/layers/layer00/stats?measure=median",
        "/api/v1/layers/layer00/filters?normalize=log",
        "/api/v1/layers/layer00/filters?cols=0",
        "/api/v1/topfilters",
        "/api/v1/topfilters?iter=0",
        "/api/v1/clusters?k=50",
    ] {
        let (status, body) = get(&state, uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}: {body}");
        assert_eq!(body["status"], 400);
    }
}

#[tokio::test]
async fn correlation_matches_direct_call() {
    let (_tmp, state) = fixture();
    let (status, body) = get(&state, "/api/v1/correlation?top_k=100&min_fraction=0.5").await;
    assert_eq!(status, StatusCode::OK);
    let direct = build_grid(
        state.store(),
        &GridParams {
            top_k: 100,
            min_fraction: 0.5,
            ..GridParams::default()
        },
    )
    .unwrap();
    assert_eq!(body, serde_json::to_value(&direct).unwrap());
    let cols: Vec<u64> = body["cols"].as_array().unwrap().iter().map(|c| c["class_id"].as_u64().unwrap()).collect();
    assert_eq!(cols, vec![7, 3]);

    let (status, cell) = get(&state, "/api/v1/correlation/cell?layer=layer01&class=7&top_k=2").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(cell["count"], 2);
    let (status, _) = get(&state, "/api/v1/correlation/cell?layer=layer02&class=7&top_k=2").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn repeated_calls_identical_and_cached() {
    let (_tmp, state) = fixture();
    let uris = ["/api/v1/cube", "/api/v1/classes?cluster=0", "/api/v1/clusters?k=3&seed=9"];
    for uri in uris {
        let a = get(&state, uri).await;
        let b = get(&state, uri).await;
        assert_eq!(a.0, StatusCode::OK, "{uri}");
        assert_eq!(a, b);
    }
    assert_eq!(state.cached_entries(), uris.len());
}

#[tokio::test]
async fn class_views() {
    let (_tmp, state) = fixture();
    let (_, class) = get(&state, "/api/v1/classes/7").await;
    assert_eq!(class["left_score"][10], 10);
    assert_eq!(class["right_score"][10], 10);
    assert_eq!(class["events"].as_array().unwrap().len(), 2);
    let (_, images) = get(&state, "/api/v1/classes/7/images").await;
    let images = images.as_array().unwrap();
    assert_eq!(images.len(), 10);
    assert_eq!(images[0]["sequence"].as_array().unwrap().len(), 24);
    assert!(images[0]["uri"].is_string());
    let (_, all) = get(&state, "/api/v1/classes").await;
    assert_eq!(all.as_array().unwrap().len(), 20);
    let (_, clusters) = get(&state, "/api/v1/clusters").await;
    assert_eq!(clusters["k"], 4);
    let members: usize = (0..4)
        .map(|c| get_members(&clusters, c))
        .sum();
    assert_eq!(members, 20);
}

fn get_members(clusters: &Value, c: u64) -> usize {
    clusters["assignments"].as_array().unwrap().iter().filter(|a| a.as_u64() == Some(c)).count()
}

#[tokio::test]
async fn layer_views() {
    let (_tmp, state) = fixture();
    let (_, stats) = get(&state, "/api/v1/layers/model/stats?measure=sd").await;
    assert_eq!(stats["box_over"], "children");
    assert_eq!(stats["children"].as_array().unwrap().len(), 3);
    assert_eq!(stats["boxplots"].as_array().unwrap().len(), 24);
    let (_, stats) = get(&state, "/api/v1/layers/layer00/stats?measure=update_ratio").await;
    assert_eq!(stats["box_over"], "filters");
    assert!(stats["series"]["values"][0].is_null());
    assert!(stats["boxplots"][0].is_null());
    assert_eq!(stats["boxplots"][1]["min"], 0.0);

    let (_, raw) = get(&state, "/api/v1/layers/layer00/filters?normalize=raw").await;
    assert_eq!(raw["matrix"]["columns"], 23);
    let row4 = &raw["matrix"]["values"].as_array().unwrap()[4 * 23..5 * 23];
    assert!(row4.iter().all(|v| v.as_f64() == Some(0.0)));
    let (_, pooled) = get(&state, "/api/v1/layers/layer00/filters?cols=5").await;
    assert_eq!(pooled["matrix"]["columns"], 5);
    assert_eq!(pooled["normalize"], "filter");
    let ranges = pooled["column_ranges"].as_array().unwrap();
    assert_eq!(ranges[0][0], 1600);
    assert_eq!(ranges[4][1], 23 * 1600);

    let (_, top) = get(&state, "/api/v1/topfilters?iter=16000&k=2").await;
    let mut got: Vec<(String, u64)> = top
        .as_array()
        .unwrap()
        .iter()
        .map(|f| (f["layer_id"].as_str().unwrap().to_string(), f["filter"].as_u64().unwrap()))
        .collect();
    got.sort();
    assert_eq!(got, vec![("layer01".into(), 1), ("layer01".into(), 2)]);
}

#[tokio::test]
async fn reports_agree_with_api() {
    let (_tmp, state) = fixture();
    let p = QueryParams::default();
    let store = state.store();
    let events = store.detect_anomalies(p.k, p.min_fraction).unwrap();
    let csv = export_report(store, ReportKind::Anomalies, &p, ReportFormat::Csv).unwrap();
    assert_eq!(csv.lines().count(), events.len() + 1);

    let json: Value = serde_json::from_str(&export_report(store, ReportKind::Anomalies, &p, ReportFormat::Json).unwrap()).unwrap();
    assert_eq!(json, get(&state, "/api/v1/anomalies").await.1);
    let grid: Value = serde_json::from_str(&export_report(store, ReportKind::Grid, &p, ReportFormat::Json).unwrap()).unwrap();
    assert_eq!(grid, get(&state, "/api/v1/correlation").await.1);

    let all = export_report(store, ReportKind::All, &p, ReportFormat::Json).unwrap();
    assert_eq!(all, export_report(store, ReportKind::All, &p, ReportFormat::Json).unwrap());
    let all: Value = serde_json::from_str(&all).unwrap();
    assert_eq!(all["dead_filters"][0]["filters"], serde_json::json!([4]));

    let dead = export_report(store, ReportKind::DeadFilters, &p, ReportFormat::Csv).unwrap();
    assert_eq!(dead, "layer_id,filter\nlayer00,4\n");
    assert!(export_report(store, ReportKind::All, &p, ReportFormat::Csv).is_err());
    assert!("xml".parse::<ReportFormat>().is_err());
    assert!("summary".parse::<ReportKind>().is_err());
    let minisets = export_report(store, ReportKind::Minisets, &p, ReportFormat::Csv).unwrap();
    assert!(minisets.starts_with("layer_id,miniset,size,filters,iterations,appearances\n"));
}
