use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use cdemapper::jobs::Jobs;
use cdemapper::server::{router, Shared};
use cdemapper_core::corpus::{load_corpus, LoadOptions};
use cdemapper_core::store::Store;
use cdemapper_core::{Bm25Params, Gateway, IndexBundle, PipelineConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn app(store_dir: &std::path::Path) -> Router {
    let corpus = std::fs::File::open(fixtures().join("corpus.json")).unwrap();
    let records = load_corpus(corpus, &LoadOptions::default()).unwrap().records;
    let bundle = IndexBundle::build(records, Bm25Params::default(), "2024-10-16").unwrap();
    let state = Arc::new(Shared {
        bundle,
        store: Store::open(store_dir).unwrap(),
        gateway: Some(Gateway::mock()),
        jobs: Jobs::default(),
        default_config: PipelineConfig::default(),
    });
    router(state, None, &[])
}

async fn call(app: &Router, request: Request<Body>) -> (StatusCode, Vec<u8>) {
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, body) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let request = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, body) = call(app, request).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn upload(app: &Router, csv: &[u8], fields: &[(&str, &str)]) -> (StatusCode, Value) {
    let boundary = "cdemapperboundary";
    let mut body = Vec::new();
    for (name, value) in fields {
        body.extend(format!("--{boundary}\r\ncontent-disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").bytes());
    }
    body.extend(
        format!("--{boundary}\r\ncontent-disposition: form-data; name=\"file\"; filename=\"d.csv\"\r\ncontent-type: text/csv\r\n\r\n")
            .bytes(),
    );
    body.extend_from_slice(csv);
    body.extend(format!("\r\n--{boundary}--\r\n").bytes());
    let request = Request::post("/api/projects")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    let (status, body) = call(app, request).await;
    (status, serde_json::from_slice(&body).unwrap())
}

async fn wait_for_job(app: &Router, job_id: &str) -> Value {
    for _ in 0..600 {
        let (_, job) = get(app, &format!("/api/jobs/{job_id}")).await;
        if job["state"] != "running" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {job_id} did not finish");
}

#[tokio::test]
async fn unknown_ids_get_structured_404s() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    for uri in ["/api/projects/nope", "/api/jobs/nope", "/api/cde/nope", "/api/nothing-here"] {
        let (status, body) = get(&app, uri).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["error"]["code"], "not_found", "{uri}");
        assert!(body["error"]["message"].is_string());
    }
    let (status, body) = post_json(&app, "/api/search", json!({ "nope": 1 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "invalid_request");
    let request = Request::post("/api/search")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let (status, body) = call(&app, request).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let body: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(body["error"]["code"], "invalid_request");
}

#[tokio::test]
async fn manual_search_finds_imaging_modality_type() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, body) =
        post_json(&app, "/api/search", json!({ "query": "Imaging Modality Type", "collections": ["NINDS"] })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["candidates"][0]["tiny_id"], "a8ue8em4k");
    assert_eq!(body["candidates"][0]["rank"], 1);

    let (_, info) = get(&app, "/api/info").await;
    assert_eq!(info["record_count"], 1423);
    assert_eq!(info["gateway"], "mock");
    let (_, collections) = get(&app, "/api/collections").await;
    let total: u64 = collections.as_array().unwrap().iter().map(|c| c["count"].as_u64().unwrap()).sum();
    assert_eq!(total, 1423);
}

#[tokio::test]
async fn empty_project_map_all_completes_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, created) = upload(&app, b"name,description,values\n", &[("name", "empty")]).await;
    assert_eq!(status, StatusCode::CREATED);
    let pid = created["project"]["project_id"].as_str().unwrap();
    let (status, job) = post_json(&app, &format!("/api/projects/{pid}/map-all"), json!({})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(job["state"], "completed");
    assert_eq!(job["total"], 0);
}

#[tokio::test]
async fn review_workflow_over_the_eye_dictionary() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let csv = std::fs::read(fixtures().join("dictionaries/eye.csv")).unwrap();
    let (status, created) =
        upload(&app, &csv, &[("name", "Eye"), ("preset", "bm25+rank"), ("collections", "NIH-Endorsed,NEI")]).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    assert_eq!(created["import"]["imported"], 40);
    let pid = created["project"]["project_id"].as_str().unwrap().to_string();

    let (_, page) = get(&app, &format!("/api/projects/{pid}/elements?page_size=100")).await;
    assert_eq!(page["total"], 40);
    assert_eq!(page["elements"].as_array().unwrap().len(), 40);
    let (status, _) = get(&app, &format!("/api/projects/{pid}/elements?status=bogus")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, job) = post_json(&app, &format!("/api/projects/{pid}/map-all"), json!({})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job = wait_for_job(&app, job["job_id"].as_str().unwrap()).await;
    assert_eq!((job["state"].as_str(), job["processed"].as_u64(), job["failed"].as_u64()), (Some("completed"), Some(40), Some(0)));

    let (_, ready) = get(&app, &format!("/api/projects/{pid}/elements?status=candidates_ready&page_size=100")).await;
    assert_eq!(ready["total"], 40);

    // Find the Race-White row and confirm its first candidate.
    let (_, all) = get(&app, &format!("/api/projects/{pid}/elements?page_size=100")).await;
    let white = all["elements"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["element"]["name"] == "Race-White")
        .expect("Race-White row")
        .clone();
    let eid = white["element"]["element_id"].as_str().unwrap();
    let cands = white["candidates"]["candidates"].as_array().unwrap();
    assert!(cands.len() <= 10);
    assert!(cands.iter().filter(|c| c["llm_suggested"] == true).count() <= 1);
    assert!(cands.iter().enumerate().all(|(i, c)| c["rank"] == i + 1));
    let chosen = cands[0]["tiny_id"].as_str().unwrap().to_string();
    assert_eq!(chosen, "CMj2AfTik");

    let (status, mapping) = post_json(
        &app,
        &format!("/api/projects/{pid}/elements/{eid}/value-mappings"),
        json!({ "tiny_id": chosen }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(mapping["status"], "available");
    assert_eq!(mapping["matches"][0]["matched_value"], "White");
    assert_eq!(mapping["matches"][0]["score"], 1.0);

    let (status, decided) = post_json(
        &app,
        &format!("/api/projects/{pid}/elements/{eid}/decision"),
        json!({ "selected": chosen, "origin": "human_selected", "value_mappings": mapping["matches"] }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(decided["status"], "mapped");

    let (status, bad) = post_json(
        &app,
        &format!("/api/projects/{pid}/elements/{eid}/decision"),
        json!({ "selected": "not-a-cde", "origin": "human_selected" }),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(bad["error"]["code"], "not_found");
    // A real CDE that was never offered needs the manual_search origin.
    let (status, bad) = post_json(
        &app,
        &format!("/api/projects/{pid}/elements/{eid}/decision"),
        json!({ "selected": "a8ue8em4k", "origin": "human_selected" }),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(bad["error"]["code"], "invalid_decision");

    let (status, csv) = call(&app, Request::get(format!("/api/projects/{pid}/export")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(csv).unwrap();
    let row = text.lines().find(|l| l.starts_with("Race-White,")).unwrap();
    assert!(row.contains("CMj2AfTik") && row.contains("human_selected") && row.contains("White=White") && row.ends_with("mapped"), "{row}");
    assert_eq!(text.lines().count(), 41);

    let (_, summary) = get(&app, &format!("/api/projects/{pid}")).await;
    assert_eq!(summary["status_counts"]["mapped"], 1);
}
