mod common;

use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use deadnet_annotate::http::{router, NextResponse};
use deadnet_annotate::Campaign;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &std::path::Path, n: usize, ui: Option<std::path::PathBuf>) -> Router {
    let c = Campaign::open(common::catalog(dir, n), dir.join("log.jsonl"), 4).unwrap();
    router(Arc::new(Mutex::new(c)), ui)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let ctype = res.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec(), ctype)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>, Option<String>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let (s, b, _) = call(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn next_serves_frames_without_dose() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 8, None);
    let (s, body, _) = get(&app, "/api/next?annotator=ana").await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(body.clone()).unwrap();
    assert!(!text.contains("light_dose") && !text.contains("stage_position"));
    let next: NextResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(next.presentation, 1);
    assert_eq!(next.frames.len(), 10);
    let (s, bytes, ctype) = get(&app, &next.frames[3]).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, format!("{}:3", next.sequence).into_bytes());
    assert_eq!(ctype.as_deref(), Some("image/png"));

    assert_eq!(get(&app, "/api/next?annotator=").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/sequence/nope/frame/0").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, &format!("/api/sequence/{}/frame/10", next.sequence)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn annotate_acknowledges_duplicates_and_rejects_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 8, None);
    let body = json!({"annotator": "ana", "sequence": "seq0002", "label": "Sick", "presentation": 1});
    assert_eq!(post(&app, "/api/annotate", body.clone()).await, (StatusCode::OK, json!({"status": "recorded"})));
    assert_eq!(post(&app, "/api/annotate", body).await, (StatusCode::OK, json!({"status": "duplicate"})));
    let flip = json!({"annotator": "ana", "sequence": "seq0002", "label": "Healthy", "presentation": 1});
    assert_eq!(post(&app, "/api/annotate", flip).await.0, StatusCode::CONFLICT);
    let unknown = json!({"annotator": "ana", "sequence": "zzz", "label": "Sick", "presentation": 2});
    assert_eq!(post(&app, "/api/annotate", unknown).await.0, StatusCode::NOT_FOUND);
    let bad = json!({"annotator": "ana", "sequence": "seq0001", "label": "Maybe", "presentation": 2});
    assert!(post(&app, "/api/annotate", bad).await.0.is_client_error());
}

#[tokio::test]
async fn scripted_session_concordance_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 60, None);
    for turn in 0..40 {
        let who = ["ana", "ben"][turn % 2];
        let (_, body, _) = get(&app, &format!("/api/next?annotator={who}")).await;
        let next: NextResponse = serde_json::from_slice(&body).unwrap();
        let label = if next.sequence.ends_with(['0', '2', '4', '6', '8']) { "Healthy" } else { "Sick" };
        let rec = json!({"annotator": who, "sequence": next.sequence, "label": label, "presentation": next.presentation});
        assert_eq!(post(&app, "/api/annotate", rec).await.0, StatusCode::OK);
    }
    let (s, body, _) = get(&app, "/api/concordance").await;
    assert_eq!(s, StatusCode::OK);
    let k: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(k["overlaps"], 8);
    assert_eq!(k["disagreements"], 0);
    assert_eq!(k["chain"]["performance_bound"], 1.0);

    let (s, a, _) = get(&app, "/api/export?train_fraction=0.5&seed=3").await;
    assert_eq!(s, StatusCode::OK);
    let (_, b, _) = get(&app, "/api/export?train_fraction=0.5&seed=3").await;
    assert_eq!(a, b);
    let e: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(e["kept_sequences"], 32);
    assert_eq!(e["train"].as_array().unwrap().len() + e["test"].as_array().unwrap().len(), 320);
    assert_eq!(get(&app, "/api/export?train_fraction=2").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn static_ui_is_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<p>hi</p>").unwrap();
    let app = app(dir.path(), 4, Some(ui));
    let (s, body, _) = get(&app, "/index.html").await;
    assert_eq!((s, body), (StatusCode::OK, b"<p>hi</p>".to_vec()));
    assert_eq!(get(&app, "/api/concordance").await.0, StatusCode::OK);
}
