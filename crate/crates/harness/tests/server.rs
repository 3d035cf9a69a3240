use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use scopegen_core::human::{HumanJudge, HumanQueue};
use scopegen_core::oracle::ExactMatch;
use scopegen_core::AdmissionOracle;
use scopegen_harness::server::router;
use scopegen_harness::session::calibrate_once;
use scopegen_harness::{ExperimentConfig, Method};

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let resp = app
        .clone()
        .oneshot(req.body(Body::from(body.unwrap_or("").to_string())).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

#[tokio::test]
async fn empty_queue_and_unknown_ids() {
    let app = router(HumanQueue::new(Duration::from_secs(1)));
    assert_eq!(call(&app, "GET", "/queries/next", None).await.0, StatusCode::NO_CONTENT);
    let (s, st) = call(&app, "GET", "/status", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(st["pending"], 0);
    assert_eq!(st["answered"], 0);
    assert_eq!(st["calibration_stage"], Value::Null);
    let ok = Some(r#"{"admissible": true}"#);
    assert_eq!(call(&app, "POST", "/queries/7/verdict", ok).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/queries/abc/verdict", ok).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn verdict_unblocks_and_duplicates_conflict() {
    let queue = HumanQueue::new(Duration::from_secs(10));
    let app = router(Arc::clone(&queue));
    let q = Arc::clone(&queue);
    let asker = tokio::task::spawn_blocking(move || q.ask(3, 1, 4, json!({"c": 1}), json!(5), json!(5)));
    let task = loop {
        let (s, v) = call(&app, "GET", "/queries/next", None).await;
        if s == StatusCode::OK {
            break v;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    };
    assert_eq!(task["instance_id"], 3);
    assert_eq!(task["stage"], 1);
    assert_eq!(task["position"], 4);
    assert_eq!(task["candidate_payload"], 5);
    let id = task["query_id"].as_u64().unwrap();
    // leased to this session, so nobody else sees it
    assert_eq!(call(&app, "GET", "/queries/next", None).await.0, StatusCode::NO_CONTENT);

    let uri = format!("/queries/{id}/verdict");
    for bad in [r#"{"admissible": "yes"}"#, r#"{"ok": true}"#, "not json", r#"{}"#] {
        assert_eq!(call(&app, "POST", &uri, Some(bad)).await.0, StatusCode::BAD_REQUEST, "{bad}");
    }
    let (s, ack) = call(&app, "POST", &uri, Some(r#"{"admissible": true}"#)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ack["admissible"], true);
    assert!(asker.await.unwrap().unwrap());

    let (s, _) = call(&app, "POST", &uri, Some(r#"{"admissible": false}"#)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, st) = call(&app, "GET", "/status", None).await;
    assert_eq!(st["answered"], 1);
    assert_eq!(st["pending"], 0);
    assert_eq!(st["calibration_stage"], 1);
}

/// A labeler answering every question over HTTP with the verdicts an automated
/// oracle gave reproduces the automated calibration exactly.
async fn human_run_matches_automated(method: Method) {
    let cfg = ExperimentConfig {
        method,
        n_calibration: 90,
        seed: Some(12),
        ..Default::default()
    };
    let auto = AdmissionOracle::new(ExactMatch);
    let expected = calibrate_once(&cfg, &auto).unwrap();
    let answers: HashMap<(u64, usize, usize), bool> = auto
        .records()
        .into_iter()
        .map(|r| ((r.instance_id, r.stage, r.position), r.admissible))
        .collect();

    let queue = HumanQueue::new(Duration::from_secs(30));
    let app = router(Arc::clone(&queue));
    let oracle = AdmissionOracle::new(HumanJudge::new(Arc::clone(&queue)));
    let calibration = tokio::task::spawn_blocking(move || {
        let r = calibrate_once(&cfg, &oracle);
        (r, oracle.query_count())
    });
    let mut answered = 0;
    while !calibration.is_finished() {
        let (s, task) = call(&app, "GET", "/queries/next", None).await;
        if s != StatusCode::OK {
            tokio::time::sleep(Duration::from_millis(1)).await;
            continue;
        }
        let key = (
            task["instance_id"].as_u64().unwrap(),
            task["stage"].as_u64().unwrap() as usize,
            task["position"].as_u64().unwrap() as usize,
        );
        let body = json!({ "admissible": answers[&key] }).to_string();
        let uri = format!("/queries/{}/verdict", task["query_id"]);
        assert_eq!(call(&app, "POST", &uri, Some(&body)).await.0, StatusCode::OK);
        answered += 1;
    }
    let (got, queries) = calibration.await.unwrap();
    assert_eq!(got.unwrap(), expected);
    assert_eq!(answered, expected.query_count());
    assert_eq!(queries, expected.query_count());
    let (_, st) = call(&app, "GET", "/status", None).await;
    let per_stage: u64 = st["stage_queries"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(per_stage as usize, answered);
}

#[tokio::test(flavor = "multi_thread")]
async fn human_labeled_scope_run_replays_automated() {
    human_run_matches_automated(Method::ScopeGen).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn human_labeled_clm_run_replays_automated() {
    human_run_matches_automated(Method::ClmReducedMax).await;
}
