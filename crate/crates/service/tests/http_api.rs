mod common;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use common::*;
use http_body_util::BodyExt;
use moodbridge_service::http::router;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Client {
    app: Router,
}

impl Client {
    async fn call(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, value)
    }

    async fn login(&self, id: &str) -> String {
        let (s, v) = self.call(Method::POST, "/auth/login", None, Some(json!({"account_id": id, "password": "pw"}))).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v["token"].as_str().unwrap().to_string()
    }
}

fn assert_envelope(v: &Value, code: &str) {
    assert_eq!(v["error"]["code"], code, "{v}");
    assert!(v["error"]["message"].is_string(), "{v}");
}

fn harness() -> (Harness, Client) {
    let h = Harness::new();
    let app = router(h.svc.clone());
    (h, Client { app })
}

#[tokio::test]
async fn auth_errors_use_the_envelope() {
    let (_h, c) = harness();
    let (s, v) = c.call(Method::POST, "/auth/login", None, Some(json!({"account_id": "p1", "password": "nope"}))).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_envelope(&v, "bad_credentials");

    let (s, v) = c.call(Method::GET, "/patients", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_envelope(&v, "unauthenticated");

    let (s, v) = c.call(Method::GET, "/patients", Some("forged"), None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_envelope(&v, "unauthenticated");

    let (s, v) = c.call(Method::POST, "/auth/login", None, Some(json!({"account_id": "p1"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&v, "invalid_request");

    let (s, v) = c.call(Method::GET, "/nowhere", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_envelope(&v, "not_found");
}

#[tokio::test]
async fn role_gates() {
    let (_h, c) = harness();
    let doc = c.login("d1").await;
    let (s, v) = c.call(Method::POST, "/sessions", Some(&doc), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_envelope(&v, "role_error");

    let pat = c.login("p1").await;
    let (s, v) = c.call(Method::GET, "/patients", Some(&pat), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_envelope(&v, "role_error");

    let (s, v) = c.call(Method::GET, "/patients/p2/timeline", Some(&pat), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_envelope(&v, "forbidden");
}

#[tokio::test]
async fn full_workflow_over_http() {
    let (h, c) = harness();
    let (pat, fam, doc) = (c.login("p1").await, c.login("f1").await, c.login("d1").await);

    let (s, sess) = c.call(Method::POST, "/sessions", Some(&pat), None).await;
    assert_eq!(s, StatusCode::CREATED);
    let sid = sess["id"].as_str().unwrap().to_string();
    assert_eq!(sess["turns"], json!([]));

    let (s, turn) =
        c.call(Method::POST, &format!("/sessions/{sid}/turns"), Some(&pat), Some(json!({"text": "I can't sleep"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(turn["speaker"], "assistant");
    assert_eq!(turn["text"], SLEEP_PROBE);

    let (s, v) = c.call(Method::POST, &format!("/sessions/{sid}/turns"), Some(&pat), Some(json!({"text": ""}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&v, "invalid_request");

    let (_, closed) = c.call(Method::POST, &format!("/sessions/{sid}/close"), Some(&pat), None).await;
    let job = closed["job_id"].as_str().unwrap().to_string();
    h.svc.wait_job(&job).await.unwrap();
    let (_, status) = c.call(Method::GET, &format!("/jobs/{job}"), Some(&doc), None).await;
    assert_eq!(status["status"], "done");
    let rid = status["report_id"].as_str().unwrap().to_string();

    let (s, v) = c.call(Method::POST, &format!("/sessions/{sid}/turns"), Some(&pat), Some(json!({"text": "again"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_envelope(&v, "session_closed");

    let (s, roster) = c.call(Method::GET, "/patients", Some(&doc), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(roster[0]["patient_id"], "p1");
    assert_eq!(roster[0]["latest_status"], Value::Null);

    let (s, draft) = c.call(Method::GET, &format!("/reports/{rid}"), Some(&doc), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(draft["state"], "draft");
    assert_eq!(draft["report"]["severity_degree"], "mild");
    let (s, v) = c.call(Method::GET, &format!("/reports/{rid}"), Some(&pat), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_envelope(&v, "not_found");

    let (s, v) =
        c.call(Method::PATCH, &format!("/reports/{rid}"), Some(&doc), Some(json!({"severity_degree": "normal"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_envelope(&v, "validation_failed");
    assert_eq!(v["error"]["fields"], json!(["severity_degree"]));
    assert!(v["error"]["message"].as_str().unwrap().contains("binary/severity mismatch"));

    let (s, v) = c.call(Method::PATCH, &format!("/reports/{rid}"), Some(&doc), Some(json!({"severity": "mild"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&v, "invalid_request");

    let (s, review) =
        c.call(Method::PATCH, &format!("/reports/{rid}"), Some(&doc), Some(json!({"severity_degree": "moderate"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(review["revisions"][0]["edits"][0]["after"], "moderate");

    let (s, v) = c.call(Method::POST, &format!("/reports/{rid}/feedback"), Some(&pat), Some(json!({"text": "ok"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_envelope(&v, "report_not_released");

    let (s, rel) = c.call(Method::POST, &format!("/reports/{rid}/release"), Some(&doc), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rel["state"], "released");
    let (_, rel2) = c.call(Method::POST, &format!("/reports/{rid}/release"), Some(&doc), None).await;
    assert_eq!(rel, rel2);

    let (s, view) = c.call(Method::GET, &format!("/reports/{rid}"), Some(&pat), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(view["advice"].as_array().unwrap().len(), 1);
    assert_eq!(view["advice"][0]["kind"], "treatment_strategy");
    assert!(view.get("review").is_none());

    let (_, tl) = c.call(Method::GET, "/patients/p1/timeline", Some(&fam), None).await;
    let kinds: Vec<&str> = tl["entries"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["report", "advice"]);

    let (s, fb) =
        c.call(Method::POST, &format!("/reports/{rid}/feedback"), Some(&fam), Some(json!({"text": "Walks help."}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(fb["author_role"], "family");

    let (s, cyc) = c.call(Method::GET, "/patients/p1/cyclical?from=2024-03-01&to=2024-03-04", Some(&doc), None).await;
    assert_eq!(s, StatusCode::OK);
    let scores: Vec<i64> = cyc["daily_scores"].as_array().unwrap().iter().map(|d| d["score"].as_i64().unwrap()).collect();
    assert_eq!(scores, [0, 0, 0, 75]);
    assert_eq!(cyc["average_score"], 18.75);
    assert_eq!(cyc["narrative"]["status"], "generated");

    let (s, v) = c.call(Method::GET, "/patients/p1/cyclical?from=2024-03-09&to=2024-03-01", Some(&doc), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&v, "invalid_request");
    let (s, v) = c.call(Method::GET, "/patients/p1/cyclical?from=yesterday", Some(&doc), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&v, "invalid_request");
}

#[tokio::test]
async fn gateway_failure_maps_to_retryable_error() {
    let (h, c) = harness();
    let pat = c.login("p1").await;
    let (_, sess) = c.call(Method::POST, "/sessions", Some(&pat), None).await;
    let sid = sess["id"].as_str().unwrap();
    h.fail_gateway(true);
    let (s, v) = c.call(Method::POST, &format!("/sessions/{sid}/turns"), Some(&pat), Some(json!({"text": "hello there"}))).await;
    assert_eq!(s, StatusCode::BAD_GATEWAY);
    assert_envelope(&v, "gateway_failed");
    assert_eq!(v["error"]["retryable"], true);
    h.fail_gateway(false);
    let (s, _) = c.call(Method::POST, &format!("/sessions/{sid}/turns"), Some(&pat), Some(json!({"text": "hello there"}))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, sess) = c.call(Method::GET, &format!("/sessions/{sid}"), Some(&pat), None).await;
    assert_eq!(sess["turns"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn serves_on_a_real_socket() {
    let h = Harness::new();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(h.svc.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    let body = r#"{"account_id":"d1","password":"pw"}"#;
    let req = format!(
        "POST /auth/login HTTP/1.1\r\nhost: x\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut stream = stream;
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).await.unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.contains("\"role\":\"doctor\""));
}
