use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dlow_core::repro::{service_fixture, service_probe_image};
use dlow_core::service::ServiceState;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    image: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let paths = service_fixture(dir.path()).unwrap();
    let state = Arc::new(ServiceState::load(&paths).unwrap());
    Fixture {
        _dir: dir,
        app: dlow_cli::server::router(state),
        image: service_probe_image().unwrap(),
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn strip_latency(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("latency_ms");
            map.values_mut().for_each(strip_latency);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_latency),
        _ => {}
    }
}

fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a stored response; `DLOW_UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, actual: &Value) {
    let path = golden_path(name);
    if std::env::var_os("DLOW_UPDATE_GOLDEN").is_some() || !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(actual).unwrap() + "\n").unwrap();
        return;
    }
    let expected: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(&expected, actual, "response differs from {}", path.display());
}

#[tokio::test]
async fn translate_matches_golden_response() {
    let f = fixture();
    let body = json!({"model": "pair", "image": f.image, "z": 0.5}).to_string();
    let (status, mut v) = call(&f.app, "POST", "/translate", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["latency_ms"].as_f64().unwrap() >= 0.0);
    strip_latency(&mut v);
    check_golden("translate_pair_z05.json", &v);
}

#[tokio::test]
async fn invalid_domainness_vector_is_422() {
    let f = fixture();
    let body = json!({"model": "quad", "image": f.image, "z": [0.5, 0.5, 0.5, -0.5]}).to_string();
    let (status, v) = call(&f.app, "POST", "/translate", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["kind"], "invalid_domainness");
    check_golden("translate_invalid_z.json", &v);

    let body = json!({"model": "pair", "image": f.image, "z": 1.5}).to_string();
    let (status, v) = call(&f.app, "POST", "/translate", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["message"].as_str().unwrap().contains("range"));
}

#[tokio::test]
async fn malformed_requests_are_400_or_404() {
    let f = fixture();
    let (status, v) = call(&f.app, "POST", "/translate", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["kind"], "bad_request");

    let body = json!({"model": "pair", "image": "!!!", "z": 0.5}).to_string();
    assert_eq!(
        call(&f.app, "POST", "/translate", Some(body)).await.0,
        StatusCode::BAD_REQUEST
    );

    let body = json!({"image": f.image, "z": 0.5}).to_string();
    assert_eq!(
        call(&f.app, "POST", "/translate", Some(body)).await.0,
        StatusCode::BAD_REQUEST
    );

    let body = json!({"model": "missing", "image": f.image, "z": 0.5}).to_string();
    assert_eq!(
        call(&f.app, "POST", "/translate", Some(body)).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn sweep_equals_individual_translations() {
    let f = fixture();
    let grid = [0.0, 0.25, 1.0];
    let body = json!({"model": "pair", "image": f.image, "grid": grid}).to_string();
    let (status, sweep) = call(&f.app, "POST", "/sweep", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let results = sweep["results"].as_array().unwrap();
    assert_eq!(results.len(), grid.len());
    for (r, z) in results.iter().zip(grid) {
        let body = json!({"model": "pair", "image": f.image, "z": z}).to_string();
        let (_, single) = call(&f.app, "POST", "/translate", Some(body)).await;
        assert_eq!(r["image"], single["image"]);
        assert_eq!(r["z"], single["z"]);
    }

    let body = json!({"model": "pair", "image": f.image, "grid": []}).to_string();
    let (status, empty) = call(&f.app, "POST", "/sweep", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(empty["results"], json!([]));

    let body = json!({"model": "pair", "image": f.image, "grid": [0.0, 2.0]}).to_string();
    assert_eq!(
        call(&f.app, "POST", "/sweep", Some(body)).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn info_and_health() {
    let f = fixture();
    let (status, mut info) = call(&f.app, "GET", "/info", None).await;
    assert_eq!(status, StatusCode::OK);
    let models = info["models"].as_array_mut().unwrap();
    assert_eq!(models.len(), 2);
    assert_eq!(models[1]["k"], 4);
    assert_eq!(
        models[1]["domain_names"],
        json!(["monet", "vangogh", "ukiyoe", "cezanne"])
    );
    check_golden("info.json", &info);

    let (status, health) = call(&f.app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health, json!({"status": "ok", "models": 2}));
}

#[tokio::test]
async fn oversized_body_is_rejected() {
    let f = fixture();
    let big = "a".repeat(dlow_cli::server::MAX_BODY_BYTES + 1);
    let body = json!({"model": "pair", "image": big, "z": 0.5}).to_string();
    let (status, _) = {
        let req = Request::builder()
            .method("POST")
            .uri("/translate")
            .body(Body::from(body))
            .unwrap();
        let resp = f.app.clone().oneshot(req).await.unwrap();
        (resp.status(), ())
    };
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let f = fixture();
    let body = json!({"model": "pair", "image": f.image, "z": 0.3}).to_string();
    let tasks: Vec<_> = (0..6)
        .map(|_| {
            let (app, body) = (f.app.clone(), body.clone());
            tokio::spawn(async move { call(&app, "POST", "/translate", Some(body)).await })
        })
        .collect();
    let mut images = Vec::new();
    for t in tasks {
        let (status, v) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        images.push(v["image"].as_str().unwrap().to_string());
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn empty_registry_reports_no_models() {
    let app = dlow_cli::server::router(Arc::new(ServiceState::default()));
    let (status, info) = call(&app, "GET", "/info", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(info, json!({"models": []}));
}
