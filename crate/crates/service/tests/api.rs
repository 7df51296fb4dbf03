use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use namestruct::corpus::synth::{gen_synthetic, SyntheticKind};
use namestruct::embed::ProviderConfig;
use namestruct::Corpus;
use namestruct_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    corpus_path: PathBuf,
    gold: Corpus,
    state_dir: PathBuf,
}

fn fixture(kind: SyntheticKind, n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let gold = gen_synthetic(kind, n, 3).unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    gold.write_jsonl(&corpus_path).unwrap();
    let state_dir = dir.path().join("state");
    Fixture {
        _dir: dir,
        corpus_path,
        gold,
        state_dir,
    }
}

fn app_for(f: &Fixture, state_dir: bool) -> Router {
    router(app_state(f, state_dir))
}

fn app_state(f: &Fixture, state_dir: bool) -> Arc<AppState> {
    AppState::new(ServiceConfig {
        default_corpus: Some(f.corpus_path.clone()),
        default_schema: Some(f.gold.schema.clone()),
        provider: ProviderConfig::HashedNgram { dimension: 32 },
        state_dir: state_dir.then(|| f.state_dir.clone()),
    })
    .unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn quick() -> Value {
    json!({ "epochs": 5, "hidden": 16, "seed": 1 })
}

fn gold_names(f: &Fixture, id: &str) -> Vec<String> {
    let m = f.gold.get(id).unwrap();
    f.gold.schema.names(m.labels.as_ref().unwrap())
}

fn assert_error(v: &Value, code: &str) {
    assert_eq!(v["code"], code, "{v}");
    assert!(v["error"].as_str().is_some_and(|s| !s.is_empty()));
}

#[tokio::test]
async fn health_and_creation() {
    let f = fixture(SyntheticKind::Org, 60);
    let app = app_for(&f, false);
    let (status, v) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((status, v["status"].as_str()), (StatusCode::OK, Some("ok")));

    let a = create(&app, quick()).await;
    let b = create(&app, quick()).await;
    assert_ne!(a, b);
    assert_eq!(a, "s000001");

    let (status, v) = call(&app, "POST", "/sessions", Some(json!({ "k": -1 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid_params");
    let (status, v) = call(&app, "POST", "/sessions", Some(json!({ "corpus": "/no/such/file.jsonl" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "corpus_not_found");
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "k": "many" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "schema": [] }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn query_label_verify_cycle() {
    let f = fixture(SyntheticKind::Org, 120);
    let app = app_for(&f, false);
    let id = create(&app, quick()).await;

    let (status, v) = call(&app, "GET", &format!("/sessions/{id}/status"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["budget_used"], 0);
    assert_eq!(v["status"], "awaiting_label");
    let total = v["pool_total"].as_u64().unwrap();
    let unlabeled = v["pool"]["unlabeled"].as_u64().unwrap();
    assert_eq!(total, 120);

    let (s1, q1) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    let (_, q2) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(s1, StatusCode::OK);
    assert_eq!(q1, q2);
    let qid = q1["mention_id"].as_str().unwrap().to_string();
    assert!(q1["structure_groups"].as_array().is_some_and(|g| !g.is_empty()));
    assert!(q1["info"].as_f64().unwrap() >= 1.0);

    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/verify"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/predict"), Some(json!({ "mention": "Sony Corp." }))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let other = f.gold.mentions.iter().find(|m| m.id != qid).unwrap();
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/label"),
        Some(json!({ "mention_id": other.id, "labels": gold_names(&f, &other.id) })),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "not_pending");
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/label"),
        Some(json!({ "mention_id": qid, "labels": vec!["corename"; 9] })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid_labels");

    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/label"),
        Some(json!({ "mention_id": qid, "labels": gold_names(&f, &qid) })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let weak = v["weak_labeled_count"].as_u64().unwrap();
    assert!(weak <= 50);
    assert_eq!(v["status"], "awaiting_verification");
    assert_eq!(v["loss_trace"].as_array().unwrap().len(), 5);
    let high = v["verification"]["high"].as_array().unwrap().len();
    let low = v["verification"]["low"].as_array().unwrap().len();
    assert_eq!(high + low, 30);

    let (_, st) = call(&app, "GET", &format!("/sessions/{id}/status"), None).await;
    assert_eq!(st["budget_used"], 1);
    assert_eq!(st["pool"]["unlabeled"].as_u64().unwrap(), unlabeled - 1 - weak);
    assert_eq!(st["pool_total"].as_u64().unwrap(), total);

    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, batch) = call(&app, "GET", &format!("/sessions/{id}/verify"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(batch, v["verification"]);

    let (status, p) = call(&app, "POST", &format!("/sessions/{id}/predict"), Some(json!({ "mention": "Sony Corp." }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(p["labels"].as_array().unwrap().len(), 2);
    assert!(p["confidence"].as_f64().unwrap() > 0.0);
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/predict"), Some(json!({ "mention": "  " }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/feedback"),
        Some(json!({ "verdicts": { "nope": "correct" } })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "unknown_id");

    // partial verdicts, one from each bucket
    let pick = |bucket: &str| batch[bucket][0]["mention_id"].as_str().unwrap().to_string();
    let mut verdicts = HashMap::new();
    verdicts.insert(pick("high"), "correct");
    verdicts.insert(pick("low"), "incorrect");
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/feedback"),
        Some(json!({ "verdicts": verdicts })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!((v["correct"].as_u64(), v["incorrect"].as_u64()), (Some(1), Some(1)));
    assert_eq!(v["should_stop"], false);
    assert_eq!(v["status"], "awaiting_label");
    assert_eq!(v["pool_total"].as_u64().unwrap(), total);
    let (_, q) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(q["mention_id"].as_str().unwrap(), pick("low"));

    let (status, _) = call(&app, "GET", "/sessions/s999999/status", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

/// Drives a session with gold answers until it stops.
async fn run_to_stop(app: &Router, f: &Fixture, id: &str) -> Value {
    loop {
        let (_, q) = call(app, "GET", &format!("/sessions/{id}/next"), None).await;
        let qid = q["mention_id"].as_str().unwrap().to_string();
        let (status, v) = call(
            app,
            "POST",
            &format!("/sessions/{id}/label"),
            Some(json!({ "mention_id": qid, "labels": gold_names(f, &qid) })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{v}");
        if v["status"] == "stopped" {
            return v;
        }
        let mut verdicts = HashMap::new();
        for bucket in ["high", "low"] {
            for item in v["verification"][bucket].as_array().unwrap() {
                let mid = item["mention_id"].as_str().unwrap();
                let ok = item["labels"] == json!(gold_names(f, mid));
                verdicts.insert(mid.to_string(), if ok { "correct" } else { "incorrect" });
            }
        }
        let (status, v) = call(
            app,
            "POST",
            &format!("/sessions/{id}/feedback"),
            Some(json!({ "verdicts": verdicts })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{v}");
        if v["status"] == "stopped" {
            return v;
        }
    }
}

#[tokio::test]
async fn gold_driven_session_converges_and_then_refuses() {
    let f = fixture(SyntheticKind::Date, 300);
    let app = app_for(&f, false);
    let id = create(&app, json!({ "seed": 7, "budget": 20 })).await;
    let last = run_to_stop(&app, &f, &id).await;
    assert_eq!(last["stop_reason"], "converged", "{last}");
    assert_eq!(last["should_stop"], true);
    assert!(last["low_conf_correct_rate"].as_f64().unwrap() >= 0.9);

    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/feedback"),
        Some(json!({ "verdicts": {} })),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "session_complete");
    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/predict"), Some(json!({ "mention": "6/13/2012" }))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn held_out_scores_are_reported() {
    let f = fixture(SyntheticKind::Person, 100);
    let test = gen_synthetic(SyntheticKind::Person, 40, 8).unwrap();
    let test_path = f.corpus_path.with_file_name("test.jsonl");
    test.write_jsonl(&test_path).unwrap();
    let app = app_for(&f, false);
    let id = create(&app, json!({ "test_corpus": test_path, "epochs": 5, "budget": 1 })).await;
    let (_, st) = call(&app, "GET", &format!("/sessions/{id}/status"), None).await;
    assert_eq!(st["has_test_set"], true);
    assert!(st["latest_f1"].is_null());
    let last = run_to_stop(&app, &f, &id).await;
    assert_eq!(last["stop_reason"], "budget");
    let (_, st) = call(&app, "GET", &format!("/sessions/{id}/status"), None).await;
    assert_eq!(st["f1_history"].as_array().unwrap().len(), 1);
    assert!(st["latest_f1"]["entity_f1"].as_f64().is_some());
}

#[tokio::test]
async fn sessions_survive_restart() {
    let f = fixture(SyntheticKind::Org, 80);
    let state = app_state(&f, true);
    let app = router(state.clone());
    let id = create(&app, quick()).await;
    let (_, q) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    let qid = q["mention_id"].as_str().unwrap().to_string();
    call(
        &app,
        "POST",
        &format!("/sessions/{id}/label"),
        Some(json!({ "mention_id": qid, "labels": gold_names(&f, &qid) })),
    )
    .await;
    let (_, before) = call(&app, "GET", &format!("/sessions/{id}/status"), None).await;
    let (_, batch_before) = call(&app, "GET", &format!("/sessions/{id}/verify"), None).await;
    assert_eq!(state.checkpoint_all().await.unwrap(), 1);
    assert!(checkpoint_file(&f.state_dir, &id).exists());

    let restarted = app_for(&f, true);
    let (_, after) = call(&restarted, "GET", &format!("/sessions/{id}/status"), None).await;
    assert_eq!(before, after);
    let (_, batch_after) = call(&restarted, "GET", &format!("/sessions/{id}/verify"), None).await;
    assert_eq!(batch_before, batch_after);
    let next = create(&restarted, quick()).await;
    assert_eq!(next, "s000002");
}

fn checkpoint_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

#[tokio::test]
async fn distinct_sessions_run_in_parallel() {
    let f = fixture(SyntheticKind::Org, 80);
    let app = app_for(&f, false);
    let a = create(&app, quick()).await;
    let b = create(&app, quick()).await;
    let label = |id: String| {
        let app = app.clone();
        let f = &f;
        async move {
            let (_, q) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
            let qid = q["mention_id"].as_str().unwrap().to_string();
            call(
                &app,
                "POST",
                &format!("/sessions/{id}/label"),
                Some(json!({ "mention_id": qid, "labels": gold_names(f, &qid) })),
            )
            .await
        }
    };
    let ((sa, va), (sb, vb)) = tokio::join!(label(a), label(b));
    assert_eq!((sa, sb), (StatusCode::OK, StatusCode::OK));
    // same seed and corpus: identical outcomes
    assert_eq!(va["weak_labeled"], vb["weak_labeled"]);
    assert_eq!(va["loss_trace"], vb["loss_trace"]);
}
