mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use qualcode_core::provider::EchoChat;
use qualcode_service::api::router;
use qualcode_service::workspace::{ProjectView, ReportResponse};
use qualcode_service::Workspace;

use common::*;

struct Client {
    app: Router,
}

struct Reply {
    status: StatusCode,
    content_type: Option<String>,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

impl Client {
    fn new(ws: Arc<Workspace>) -> Self {
        Self { app: router(ws) }
    }

    async fn send(&self, method: Method, uri: &str, body: Option<Value>) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let content_type = resp
            .headers()
            .get("content-type")
            .map(|v| v.to_str().unwrap().to_string());
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply {
            status,
            content_type,
            bytes,
        }
    }

    async fn get(&self, uri: &str) -> Reply {
        self.send(Method::GET, uri, None).await
    }

    async fn wait(&self, pid: &str, rid: &str) -> Value {
        for _ in 0..2000 {
            let r = self.get(&format!("/api/v1/projects/{pid}/runs/{rid}")).await.json();
            if r["status"] != "running" {
                return r;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("run {rid} did not finish");
    }
}

fn texts_json(n: usize) -> Value {
    let texts: Vec<Value> = corpus(n)
        .iter()
        .map(|t| json!({"id": t.id, "text": t.body, "order": t.created_order}))
        .collect();
    Value::Array(texts)
}

async fn annotate_all(c: &Client, pid: &str, n: usize) {
    for t in corpus(n) {
        let segments: Vec<Value> = human_segments(&t)
            .iter()
            .map(|s| json!({"start": s.span.start, "end": s.span.end, "codes": s.codes}))
            .collect();
        let r = c
            .send(
                Method::PUT,
                &format!("/api/v1/projects/{pid}/texts/{}/annotation", t.id),
                Some(json!({ "segments": segments })),
            )
            .await;
        assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
    }
}

#[tokio::test]
async fn project_lifecycle_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(workspace(dir.path(), fixed_chat(EchoChat)));

    let r = c
        .send(Method::POST, "/api/v1/projects", Some(json!({"project_id": "p", "texts": texts_json(3)})))
        .await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(r.json(), json!({"project_id": "p"}));

    let r = c
        .send(Method::POST, "/api/v1/projects", Some(json!({"project_id": "p", "texts": texts_json(1)})))
        .await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["error"], "ProjectExists");

    let dup = json!([{"id": "a", "text": "x"}, {"id": "a", "text": "y"}]);
    let r = c.send(Method::POST, "/api/v1/projects", Some(json!({"texts": dup}))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["error"], "DuplicateId");

    let r = c.send(Method::POST, "/api/v1/projects", Some(json!({"texts": texts_json(1)}))).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let generated = r.json()["project_id"].as_str().unwrap().to_string();
    let listed = c.get("/api/v1/projects").await.json();
    assert_eq!(listed.as_array().unwrap().len(), 2);
    assert!(listed.as_array().unwrap().contains(&json!(generated)));

    let view = c.get("/api/v1/projects/p").await;
    assert_eq!(view.status, StatusCode::OK);
    let view: ProjectView = serde_json::from_slice(&view.bytes).unwrap();
    assert_eq!(view.texts.len(), 3);
    assert_eq!(view.counts.annotated, 0);
    assert!(!view.warnings.is_empty());

    assert_eq!(c.get("/api/v1/projects/nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(c.get("/api/v1/projects/p/runs/run-0001").await.json()["error"], "UnknownRun");
}

#[tokio::test]
async fn annotation_and_split_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(workspace(dir.path(), fixed_chat(EchoChat)));
    c.send(Method::POST, "/api/v1/projects", Some(json!({"project_id": "p", "texts": texts_json(6)})))
        .await;
    annotate_all(&c, "p", 5).await;

    let overlap = json!({"segments": [
        {"start": 0, "end": 5, "codes": ["a"]},
        {"start": 3, "end": 8, "codes": ["b"]}
    ]});
    let r = c.send(Method::PUT, "/api/v1/projects/p/texts/t00/annotation", Some(overlap)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["error"], "OverlapRejected");
    let r = c
        .send(Method::PUT, "/api/v1/projects/p/texts/zz/annotation", Some(json!({"segments": []})))
        .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let r = c.send(Method::PUT, "/api/v1/projects/p/examples", Some(json!({"text_ids": ["t00", "t01"]}))).await;
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    let r = c.send(Method::PUT, "/api/v1/projects/p/test-set", Some(json!({"text_ids": ["t04"]}))).await;
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    let r = c.send(Method::PUT, "/api/v1/projects/p/examples", Some(json!({"text_ids": ["t04"]}))).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["error"], "TestSetViolation");
    let r = c.send(Method::PUT, "/api/v1/projects/p/examples", Some(json!({"text_ids": ["t05"]}))).await;
    assert_eq!(r.json()["error"], "UnannotatedExample");

    let r = c
        .send(Method::PUT, "/api/v1/projects/p/instructions", Some(json!({"lines": ["Do not code questions."]})))
        .await;
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    let r = c
        .send(Method::PUT, "/api/v1/projects/p/codes/cost", Some(json!({"description": "money"})))
        .await;
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    let r = c
        .send(Method::PUT, "/api/v1/projects/p/codes/unused", Some(json!({"description": "x"})))
        .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let view = c.get("/api/v1/projects/p").await.json();
    assert_eq!(view["split"]["examples"], json!(["t00", "t01"]));
    assert_eq!(view["split"]["validation"], json!(["t02", "t03"]));
    assert_eq!(view["split"]["test"], json!(["t04"]));
    assert_eq!(view["custom_instructions"], json!(["Do not code questions."]));
    assert_eq!(view["texts"][0]["role"], "example");
    assert_eq!(view["texts"][5]["role"], "unannotated");

    let r = c.send(Method::DELETE, "/api/v1/projects/p/texts/t01/annotation", None).await;
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    let view = c.get("/api/v1/projects/p").await.json();
    assert_eq!(view["split"]["examples"], json!(["t00"]));

    let changes = c.get("/api/v1/projects/p/changes").await.json();
    let ops: Vec<&str> = changes.as_array().unwrap().iter().map(|e| e["op"].as_str().unwrap()).collect();
    assert_eq!(ops[0], "create_project");
    assert_eq!(ops.last(), Some(&"remove_annotation"));
}

#[tokio::test]
async fn run_report_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let texts = corpus(10);
    let c = Client::new(workspace(dir.path(), fixed_chat(scripted_chat(&texts))));
    c.send(Method::POST, "/api/v1/projects", Some(json!({"project_id": "p", "texts": texts_json(10)})))
        .await;

    let r = c.send(Method::POST, "/api/v1/projects/p/runs", Some(json!({}))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["error"], "NoExamples");

    annotate_all(&c, "p", 10).await;
    c.send(Method::PUT, "/api/v1/projects/p/examples", Some(json!({"text_ids": ["t00", "t01", "t02"]})))
        .await;
    let r = c.send(Method::POST, "/api/v1/projects/p/runs", Some(json!({"scope": "validation"}))).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let rid = r.json()["run_id"].as_str().unwrap().to_string();
    let status = c.wait("p", &rid).await;
    assert_eq!(status["status"], "complete");
    assert_eq!(status["done"], 7);

    let url = format!("/api/v1/projects/p/runs/{rid}/report?sort=iou_asc");
    let first = c.get(&url).await;
    assert_eq!(first.status, StatusCode::OK);
    let body = first.json();
    let parsed: ReportResponse = serde_json::from_value(body.clone()).unwrap();
    assert_eq!(serde_json::to_value(&parsed).unwrap(), body);
    let ious: Vec<f64> = parsed.rows.iter().map(|r| r.metrics.as_ref().unwrap().iou).collect();
    assert!(ious.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(parsed.rows.len(), 7);

    let second = c.get(&url).await;
    assert_eq!(first.bytes, second.bytes);

    let history = c.get("/api/v1/projects/p").await.json()["iteration_history"].clone();
    assert_eq!(history[0]["summary"], body["summary"]);

    let bad = c.get(&format!("/api/v1/projects/p/runs/{rid}/report?sort=sideways")).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    assert_eq!(bad.json()["error"], "InvalidSort");

    let runs = c.get("/api/v1/projects/p/runs").await.json();
    assert_eq!(runs.as_array().unwrap().len(), 1);

    let events = c.get(&format!("/api/v1/projects/p/runs/{rid}/events")).await;
    assert_eq!(events.content_type.as_deref(), Some("text/event-stream"));
    let text = String::from_utf8(events.bytes).unwrap();
    assert!(text.contains("event: complete"), "{text}");

    let export = c.get("/api/v1/projects/p/export").await;
    assert_eq!(export.status, StatusCode::OK);
    assert_eq!(export.content_type.as_deref(), Some("application/zip"));
    assert_eq!(&export.bytes[..2], b"PK");
}

#[tokio::test]
async fn concurrent_run_requests_admit_one() {
    let dir = tempfile::tempdir().unwrap();
    let gate = GateChat::default();
    let ws = workspace(dir.path(), fixed_chat(gate.clone()));
    let texts = seeded_project(&ws, "p", 6, 6);
    ws.set_examples("p", ids(&texts, 0..2)).unwrap();
    let c = Client::new(ws);

    let (a, b) = tokio::join!(
        c.send(Method::POST, "/api/v1/projects/p/runs", None),
        c.send(Method::POST, "/api/v1/projects/p/runs", None)
    );
    let mut statuses = [a.status, b.status];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::ACCEPTED, StatusCode::CONFLICT]);
    let loser = if a.status == StatusCode::CONFLICT { a } else { b };
    assert_eq!(loser.json()["error"], "RunInProgress");

    let report = c.get("/api/v1/projects/p/runs/run-0001/report").await;
    assert_eq!(report.status, StatusCode::CONFLICT);
    assert_eq!(report.json()["error"], "RunIncomplete");
    gate.open();
    assert_eq!(c.wait("p", "run-0001").await["status"], "complete");
}
