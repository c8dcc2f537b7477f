use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use catres_core::pipeline::{analyze, export_viewer_bundle, neuron_doc_path, NeuronDoc, RunConfig};
use catres_core::synth::{generate, SynthConfig};
use catres_server::{router, Bundle, ServerConfig, ServerError, SEARCH_LIMIT};

fn bundle_dir() -> (tempfile::TempDir, String) {
    let cfg = SynthConfig { vocab_size: 400, layer0_size: 10, layer1_size: 6, embedding_dim: 16, ..SynthConfig::default() };
    let (d, _) = generate(&cfg).unwrap();
    let a = analyze(&d, &RunConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = export_viewer_bundle(&d, &a, dir.path()).unwrap();
    (dir, s.hash)
}

fn app(dir: &std::path::Path, cors: Option<&str>) -> axum::Router {
    let mut cfg = ServerConfig::new("127.0.0.1:0".parse().unwrap(), dir);
    cfg.cors_origin = cors.map(String::from);
    router(Arc::new(Bundle::load(dir).unwrap()), &cfg)
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn index_summary_and_neuron_documents() {
    let (dir, hash) = bundle_dir();
    assert_eq!(Bundle::load(dir.path()).unwrap().hash, hash);
    let app = app(dir.path(), None);

    let (s, body) = get(&app, "/api/index").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json(&body)["neurons"].as_array().unwrap().len(), 16);

    let (s, body) = get(&app, "/api/summary").await;
    assert_eq!(s, StatusCode::OK);
    for t in ["table1", "table2", "table3", "table4", "table5"] {
        assert!(json(&body).get(t).is_some(), "{t}");
    }

    let (s, body) = get(&app, "/api/neurons/1/2").await;
    assert_eq!(s, StatusCode::OK);
    let doc: NeuronDoc = serde_json::from_slice(&body).unwrap();
    assert!(!doc.precursors.is_empty());
    assert_eq!(body, std::fs::read(dir.path().join(neuron_doc_path(doc.neuron))).unwrap());

    let (s, body) = get(&app, "/api/neurons/1/2/precursors").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json(&body).as_array().unwrap().len(), doc.precursors.len());
}

#[tokio::test]
async fn unknown_neuron_is_404_with_json() {
    let (dir, _) = bundle_dir();
    let app = app(dir.path(), None);
    for uri in ["/api/neurons/9/0", "/api/neurons/9/0/precursors", "/api/nope"] {
        let (s, body) = get(&app, uri).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert!(json(&body)["error"].is_string());
    }
    let (s, _) = get(&app, "/api/neurons/x/0").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn search_orders_caps_and_validates() {
    let (dir, _) = bundle_dir();
    let app = app(dir.path(), None);
    let (s, body) = get(&app, "/api/search?q=").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(json(&body)["error"].is_string());
    assert_eq!(get(&app, "/api/search").await.0, StatusCode::BAD_REQUEST);

    let (s, body) = get(&app, "/api/search?q=zzz_no_such_token").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json(&body), serde_json::json!([]));

    // Synthetic surfaces look like " g012_07"; "_" matches every grouped token.
    let (_, body) = get(&app, "/api/search?q=_").await;
    let hits = json(&body);
    let hits = hits.as_array().unwrap();
    assert_eq!(hits.len(), SEARCH_LIMIT);
    let acts: Vec<f64> = hits.iter().map(|h| h["a"].as_f64().unwrap()).collect();
    assert!(acts.windows(2).all(|w| w[0] >= w[1]));

    // Case-sensitive.
    let (_, body) = get(&app, "/api/search?q=G0").await;
    assert_eq!(json(&body), serde_json::json!([]));
}

#[tokio::test]
async fn identical_requests_identical_bodies() {
    let (dir, _) = bundle_dir();
    let app = app(dir.path(), None);
    let mut tasks = Vec::new();
    for _ in 0..8 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move { get(&app, "/api/neurons/1/0").await.1 }));
    }
    let mut bodies = Vec::new();
    for t in tasks {
        bodies.push(t.await.unwrap());
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn cors_header_only_when_configured() {
    let (dir, _) = bundle_dir();
    let req = || Request::get("/api/index").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let res = app(dir.path(), Some("*")).oneshot(req()).await.unwrap();
    assert_eq!(res.headers()["access-control-allow-origin"], "*");
    let res = app(dir.path(), None).oneshot(req()).await.unwrap();
    assert!(res.headers().get("access-control-allow-origin").is_none());
}

#[test]
fn startup_rejects_missing_or_dangling_bundles() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(Bundle::load(empty.path()), Err(ServerError::Io { .. })));

    let (dir, _) = bundle_dir();
    std::fs::remove_file(dir.path().join("neurons/L0_N3.json")).unwrap();
    assert!(matches!(Bundle::load(dir.path()), Err(ServerError::Dangling(_))));
}
