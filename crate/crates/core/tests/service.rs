//! HTTP service round trips through the router, without binding a socket.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use compsearch::dataset::MissingFeature;
use compsearch::model::ModelConfig;
use compsearch::pipeline;
use compsearch::service::{router, ServiceConfig, ServiceState};
use compsearch::synth::{generate, SynthConfig};
use compsearch::train::{train, TrainConfig};
use compsearch::Error;

struct Fixture {
    _dir: tempfile::TempDir,
    index: PathBuf,
    checkpoint: PathBuf,
    other_checkpoint: PathBuf,
    gallery: Vec<Value>,
}

fn small_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 200,
        batch_anchors: 8,
        grad_clip: Some(10.0),
        ..TrainConfig::default()
    }
    .with_seed(seed);
    cfg.model = ModelConfig {
        din: 16,
        hidden: [16, 8],
        query_widths: [8, 8, 8],
        seed,
        ..ModelConfig::desk(4)
    };
    cfg
}

/// Eight scenes, overfit by a small model, indexed with their annotations.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        scenes: 8,
        din: 16,
        cluster_size: 1,
        seed: 11,
        ..SynthConfig::default()
    };
    let corpus = generate(&synth).unwrap();
    let manifest = corpus.dataset.save(dir.path(), "gallery", None).unwrap();
    let (model, _) = train(&small_cfg(1), &corpus.dataset, Some(&dir.path().join("a"))).unwrap();
    let checkpoint = dir.path().join("a/checkpoint.cten");
    drop(model);
    let (_, _) = train(
        &TrainConfig {
            epochs: 1,
            ..small_cfg(2)
        },
        &corpus.dataset,
        Some(&dir.path().join("b")),
    )
    .unwrap();
    let index = pipeline::index_from_files(&manifest, &checkpoint, MissingFeature::Abort).unwrap();
    let index_path = dir.path().join("gallery.cidx");
    index.save(&index_path).unwrap();
    let gallery = corpus
        .dataset
        .scenes
        .iter()
        .map(|s| serde_json::to_value(s).unwrap())
        .collect();
    Fixture {
        index: index_path,
        checkpoint,
        other_checkpoint: dir.path().join("b/checkpoint.cten"),
        gallery,
        _dir: dir,
    }
}

fn config(index: &Path, checkpoint: &Path) -> ServiceConfig {
    ServiceConfig {
        index: index.into(),
        checkpoint: checkpoint.into(),
        max_k: 8,
        ..ServiceConfig::default()
    }
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec(),
    )
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &axum::Router, body: &Value) -> (StatusCode, Value) {
    let req = Request::post("/search")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, bytes) = call(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn strip_timing(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timingMs");
    v
}

#[tokio::test]
async fn endpoints_follow_the_contract() {
    let fx = fixture();
    let state = ServiceState::load(&config(&fx.index, &fx.checkpoint)).unwrap();
    let app = router(Arc::new(state));

    let (status, body) = get(&app, "/health").await;
    assert_eq!(status, StatusCode::OK);
    let health: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(
        health,
        json!({"status": "ok", "gallery": 8, "dout": 4, "categories": 8})
    );

    let (status, body) = get(&app, "/categories").await;
    assert_eq!(status, StatusCode::OK);
    let cats: Vec<Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(cats.len(), 8);
    assert_eq!(cats[3]["id"], 3);

    let mut found = 0;
    for scene in &fx.gallery {
        let (status, resp) = post(
            &app,
            &json!({"objects": scene["objects"], "k": 3, "mode": "cal"}),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{resp}");
        let results = resp["results"].as_array().unwrap();
        assert_eq!(results.len(), 3);
        assert_eq!(results[0]["rank"], 1);
        assert!(results[0]["thumbnail"]
            .as_str()
            .unwrap()
            .starts_with("/thumb/"));
        assert!(resp["timingMs"].as_f64().unwrap() >= 0.0);
        if results.iter().any(|r| r["id"] == scene["id"]) {
            found += 1;
        }
    }
    assert!(
        found >= 6,
        "own annotation retrieved in top 3 for only {found} of 8 items"
    );

    let body = json!({"objects": fx.gallery[0]["objects"], "k": 5});
    let (_, first) = post(&app, &body).await;
    let (_, again) = post(&app, &body).await;
    assert_eq!(strip_timing(first), strip_timing(again));

    let (status, resp) = post(
        &app,
        &json!({"objects": fx.gallery[0]["objects"], "k": 8, "mode": "textual"}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp["results"].as_array().unwrap().len(), 8);

    let (status, resp) = post(
        &app,
        &json!({"objects": [{"category": 1, "bbox": [0.1, 0.1, 0.0, 0.3]}]}),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(resp["field"], "objects[0].bbox");
    assert!(resp["error"].as_str().unwrap().contains("positive"));

    let (status, resp) = post(
        &app,
        &json!({"objects": [{"category": 1, "bbox": [0.1, 0.1, 0.2, 0.3]}], "k": 9}),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(resp["field"], "k");

    let req = Request::post("/search")
        .body(Body::from("{not json"))
        .unwrap();
    let (status, body) = call(&app, req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(serde_json::from_slice::<Value>(&body).unwrap()["error"].is_string());

    let id = fx.gallery[0]["id"].as_str().unwrap();
    let (status, png) = get(&app, &format!("/thumb/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    let (status, _) = get(&app, "/thumb/nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn refuses_to_start_with_a_different_checkpoint() {
    let fx = fixture();
    let err = ServiceState::load(&config(&fx.index, &fx.other_checkpoint))
        .err()
        .unwrap();
    assert!(matches!(err, Error::FingerprintMismatch { .. }), "{err}");
    let ok = ServiceState::load(&ServiceConfig {
        max_k: 100,
        ..config(&fx.index, &fx.checkpoint)
    })
    .unwrap();
    assert_eq!(ok.max_k, 8);
    assert_eq!(ok.timeout, Duration::from_millis(10_000));
}
