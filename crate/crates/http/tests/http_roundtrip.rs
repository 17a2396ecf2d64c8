use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use speechgrain_core::backend::{call_with_retry, endpoints, Backend, BackendError, RetryPolicy};
use speechgrain_core::mock::MockBackend;
use speechgrain_core::review::{AdjudicationDecision, ReviewDecision, ReviewQueue, Verdict};
use speechgrain_core::schema::fixtures::record;
use speechgrain_core::schema::{parse_manifest, TagVocabulary};
use speechgrain_core::Language;
use speechgrain_http::{mock_router, review_router, BackendMap, BackgroundServer, HttpBackend, ReviewService};

#[test]
fn http_backend_speaks_the_wire_contract() {
    let r = record("u1", Language::En, "<Laughter> hello there");
    let mock: Arc<dyn Backend> = Arc::new(MockBackend::new().with_records([r]).with_answer_key([("i1".to_string(), 1)]));
    let server = BackgroundServer::start(mock_router(mock)).unwrap();
    let client = HttpBackend::new(server.url()).unwrap();

    let out = client.call(endpoints::CHOOSE, &json!({ "item_id": "i1" })).unwrap();
    assert_eq!(out["text"], "B");
    let out = client.call(endpoints::TRANSCRIBE_TAGGED, &json!({ "utterance_id": "u1" })).unwrap();
    assert_eq!(out["text"], "<Laughter> hello there");

    // Unknown utterance: the mock rejects, which must not be retried.
    let err = call_with_retry(&client, endpoints::TRANSCRIBE, &json!({ "utterance_id": "nope" }), &RetryPolicy::immediate(3))
        .unwrap_err();
    assert!(matches!(err.last, BackendError::Rejected(_)));
    assert_eq!(err.attempts, 1);
}

#[test]
fn unreachable_backend_is_transient() {
    let dead = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let client = HttpBackend::with_timeout(format!("http://{dead}"), Duration::from_secs(2)).unwrap();
    let err = call_with_retry(&client, endpoints::CHOOSE, &json!({}), &RetryPolicy::immediate(2)).unwrap_err();
    assert!(err.last.is_transient());
    assert_eq!(err.attempts, 2);
}

#[test]
fn backend_map_requires_default_and_known_filters() {
    assert!(BackendMap::from_json(r#"{"wer": "http://x"}"#).is_err());
    assert!(BackendMap::from_json(r#"{"default": "http://x", "bogus": "http://y"}"#).is_err());
    let m = BackendMap::from_json(r#"{"default": "http://x", "emotion": "http://y"}"#).unwrap();
    assert!(m.experts().is_ok());
}

fn review_server() -> (BackgroundServer, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("audio")).unwrap();
    std::fs::write(dir.path().join("audio/u1.wav"), b"RIFFfake").unwrap();
    let queue = ReviewQueue::open(dir.path().join("log.jsonl"), TagVocabulary::default()).unwrap();
    queue.enqueue(record("u1", Language::En, "hello there")).unwrap();
    let svc = Arc::new(ReviewService::new(queue, dir.path()));
    (BackgroundServer::start(review_router(svc)).unwrap(), dir)
}

fn modify(who: &str, tone: &str) -> ReviewDecision {
    let mut rev = record("u1", Language::En, "hello there");
    rev.tone = tone.into();
    ReviewDecision { reviewer_id: who.into(), verdict: Verdict::Modify, revision: Some(rev), timestamp_ms: 0 }
}

#[test]
fn review_api_full_adjudication_session() {
    let (server, _dir) = review_server();
    let http = reqwest::blocking::Client::new();
    let url = |p: &str| format!("{}{p}", server.url());
    let post = |p: &str, body: Value| http.post(url(p)).json(&body).send().unwrap();

    let queue: Value = http.get(url("/api/queue?reviewer=alice")).send().unwrap().json().unwrap();
    assert_eq!(queue.as_array().unwrap().len(), 1);
    assert_eq!(queue[0]["audio_url"], "/api/audio/u1");
    assert_eq!(queue[0]["state"], "Pending");

    let audio = http.get(url("/api/audio/u1")).send().unwrap();
    assert_eq!(audio.headers()["content-type"], "audio/wav");
    assert_eq!(audio.bytes().unwrap().as_ref(), b"RIFFfake");

    let r = post("/api/items/u1/review", json!({ "decision": modify("alice", "Tone A"), "expected_version": 1 }));
    assert_eq!(r.status(), 200);
    let v: Value = r.json().unwrap();
    assert_eq!(v["version"], 2);
    assert!(v["reviews"].is_null(), "first review is blinded");

    // Stale version → 409 with the current version.
    let r = post("/api/items/u1/review", json!({ "decision": modify("bob", "Tone B"), "expected_version": 1 }));
    assert_eq!(r.status(), 409);
    let e: Value = r.json().unwrap();
    assert_eq!(e["error"], "VersionConflict");
    assert_eq!(e["current_version"], 2);

    // Modify without revision → 422.
    let bad = json!({ "decision": { "reviewer_id": "bob", "verdict": "Modify" }, "expected_version": 2 });
    assert_eq!(post("/api/items/u1/review", bad).status(), 422);

    let r = post("/api/items/u1/review", json!({ "decision": modify("bob", "Tone B"), "expected_version": 2 }));
    let v: Value = r.json().unwrap();
    assert_eq!(v["state"], "Adjudication");
    assert_eq!(v["reviews"].as_array().unwrap().len(), 2);

    let adj_queue: Value = http.get(url("/api/queue?reviewer=carol&role=adjudicator")).send().unwrap().json().unwrap();
    assert_eq!(adj_queue.as_array().unwrap().len(), 1);

    let mut fin = record("u1", Language::En, "hello there");
    fin.tone = "Adjudicated".into();
    let decision = AdjudicationDecision { adjudicator_id: "carol".into(), consistent: true, final_revision: Some(fin), timestamp_ms: 0 };
    let r = post("/api/items/u1/adjudicate", json!({ "decision": decision, "expected_version": 3 }));
    assert_eq!(r.status(), 200);
    let v: Value = r.json().unwrap();
    assert_eq!(v["state"], "Retained");

    // Terminal state: further reviews are refused.
    assert_eq!(post("/api/items/u1/review", json!({ "decision": modify("dave", "x"), "expected_version": 4 })).status(), 409);

    let body = http.get(url("/api/export/retained")).send().unwrap().text().unwrap();
    let entries = parse_manifest(&body, &TagVocabulary::default()).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].record.tone, "Adjudicated");

    assert_eq!(http.get(url("/api/items/nope")).send().unwrap().status(), 404);
    assert_eq!(post("/api/items/nope/review", json!({ "decision": modify("x", "y"), "expected_version": 1 })).status(), 404);
}
