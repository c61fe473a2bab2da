//! Requests reaching a fake OpenAI-compatible server carry the fixed
//! instructions byte for byte, at temperature 0.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use cdemapper_core::llm::prompts::{self, Task};
use cdemapper_core::{Gateway, LlmConfig, PermissibleValue};
use serde_json::{json, Value};

type Responder = dyn Fn(&str, &Value, usize) -> (u16, String) + Send + Sync;

struct FakeServer {
    url: String,
    requests: Arc<Mutex<Vec<(String, Value)>>>,
}

fn serve(respond: Box<Responder>) -> FakeServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = requests.clone();
    let count = AtomicUsize::new(0);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                continue;
            }
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap();
            let n = count.fetch_add(1, Ordering::SeqCst);
            let (status, text) = respond(&path, &body, n);
            log.lock().unwrap().push((path, body));
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    FakeServer { url, requests }
}

fn completion(content: &str) -> String {
    json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
}

/// Plays a well-behaved model: echoes expansions, reverses rerank lists and
/// picks the first permissible value.
fn cooperative(path: &str, body: &Value, _n: usize) -> (u16, String) {
    if path.ends_with("/embeddings") {
        let data: Vec<Value> = body["input"]
            .as_array()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, _)| json!({ "index": i, "embedding": [1.0, i as f64 + 1.0] }))
            .collect();
        return (200, json!({ "data": data }).to_string());
    }
    let system = body["messages"][0]["content"].as_str().unwrap();
    let user = body["messages"][1]["content"].as_str().unwrap();
    let section = |label: &str| -> Value {
        let line = user.lines().find_map(|l| l.strip_prefix(label)).unwrap();
        serde_json::from_str(line).unwrap()
    };
    let content = match Task::from_instruction(system).expect("known instruction") {
        Task::QueryExpansion => {
            let input = section("Input: ");
            format!("```json\n{{\"term\": \"{} expanded\", \"description\": \"d\"}}\n```", input["term"].as_str().unwrap())
        }
        Task::Rerank => {
            let mut ids: Vec<Value> = section("Search Results: ").as_array().unwrap().iter().map(|c| c["id"].clone()).collect();
            ids.reverse();
            Value::Array(ids).to_string()
        }
        Task::ValueMapping => {
            let first = section("Value Set: ")[0].clone();
            json!([{ "value": first, "score": 0.9 }]).to_string()
        }
    };
    (200, completion(&content))
}

fn gateway(url: &str) -> Gateway {
    let config = LlmConfig {
        endpoint_url: url.to_string(),
        api_key_ref: "CDEMAPPER_PROMPT_TEST_UNSET_KEY".into(),
        max_retries: 2,
        retry_base_delay_ms: 1,
        request_timeout_secs: 10.0,
        ..LlmConfig::default()
    };
    Gateway::http(&config).unwrap()
}

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prompts").join(name);
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn system_messages_are_the_fixed_instructions() {
    let server = serve(Box::new(cooperative));
    let gw = gateway(&server.url);

    let expanded = gw.expand_query("BP", "blood pressure");
    assert_eq!((expanded.term.as_str(), expanded.fallback), ("BP expanded", false));

    let candidates = vec![("a".to_string(), "Race".to_string()), ("b".to_string(), "Ethnicity".to_string())];
    let reranked = gw.rerank("race", "", &candidates);
    assert_eq!(reranked.order, ["b", "a"]);

    let values = [PermissibleValue::named("White"), PermissibleValue::named("Asian")];
    let m = gw.map_value("Caucasian", &values).unwrap();
    assert_eq!((m.matched_value.as_str(), m.fallback), ("White", false));
    assert_eq!(gw.fallback_count(), 0);

    let requests = server.requests.lock().unwrap().clone();
    let expected = [
        ("query_expansion.txt", prompts::QUERY_EXPANSION_OUTPUT),
        ("rerank.txt", prompts::RERANK_OUTPUT),
        ("value_mapping.txt", prompts::VALUE_MAPPING_OUTPUT),
    ];
    assert_eq!(requests.len(), 3);
    for ((path, body), (file, output)) in requests.iter().zip(expected) {
        assert_eq!(path, "/v1/chat/completions");
        assert_eq!(body["model"], "gpt-4o");
        assert_eq!(body["temperature"].as_f64(), Some(0.0));
        let messages = body["messages"].as_array().unwrap();
        assert_eq!(messages.len(), 2);
        assert_eq!(messages[0]["role"], "system");
        assert_eq!(messages[0]["content"].as_str().unwrap(), fixture(file), "{file}");
        assert_eq!(messages[1]["role"], "user");
        let user = messages[1]["content"].as_str().unwrap();
        assert!(user.starts_with("Input: {"), "{user}");
        assert!(user.ends_with(output), "{user}");
    }
    let rerank_user = requests[1].1["messages"][1]["content"].as_str().unwrap();
    assert!(rerank_user.contains(r#"Search Results: [{"id":"a","text":"Race"},{"id":"b","text":"Ethnicity"}]"#));
    let value_user = requests[2].1["messages"][1]["content"].as_str().unwrap();
    assert!(value_user.contains(r#"Input: {"value name":"Caucasian"}"#));
    assert!(value_user.contains(r#"Value Set: ["White","Asian"]"#));
}

#[test]
fn fixture_prompts_match_published_wording() {
    let source = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../paper.md");
    let Ok(text) = std::fs::read_to_string(&source) else {
        eprintln!("{} not present; skipping wording check", source.display());
        return;
    };
    for file in ["query_expansion.txt", "rerank.txt", "value_mapping.txt"] {
        let prompt = fixture(file);
        assert!(text.contains(prompt.trim()), "{file} differs from the published text");
    }
    assert_eq!(prompts::QUERY_EXPANSION, fixture("query_expansion.txt"));
    assert_eq!(prompts::RERANK, fixture("rerank.txt"));
    assert_eq!(prompts::VALUE_MAPPING, fixture("value_mapping.txt"));
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let server = serve(Box::new(|path: &str, body: &Value, n: usize| {
        if n < 2 {
            (503, "{}".into())
        } else {
            cooperative(path, body, n)
        }
    }));
    let gw = gateway(&server.url);
    let candidates = vec![("a".to_string(), "x".to_string()), ("b".to_string(), "y".to_string())];
    let r = gw.rerank("t", "", &candidates);
    assert!(!r.fallback);
    assert_eq!(r.order, ["b", "a"]);
    assert_eq!(server.requests.lock().unwrap().len(), 3);
}

#[test]
fn malformed_and_refused_replies_fall_back() {
    let server = serve(Box::new(|path: &str, body: &Value, _n: usize| {
        if path.ends_with("/chat/completions") && body["messages"][0]["content"] == prompts::RERANK {
            (200, completion("[\"a\", \"zzz\"]"))
        } else {
            (401, "{\"error\":\"no key\"}".into())
        }
    }));
    let gw = gateway(&server.url);
    let candidates = vec![("a".to_string(), "x".to_string()), ("b".to_string(), "y".to_string())];
    let r = gw.rerank("t", "", &candidates);
    assert!(r.fallback);
    assert_eq!(r.order, ["a", "b"]);
    let e = gw.expand_query("term", "desc");
    assert!(e.fallback);
    assert_eq!((e.term.as_str(), e.description.as_str()), ("term", "desc"));
    let m = gw.map_value("white", &[PermissibleValue::named("Asian"), PermissibleValue::named("White")]).unwrap();
    assert_eq!((m.matched_value.as_str(), m.score, m.fallback), ("White", 1.0, true));
    assert_eq!(gw.fallback_count(), 3);
    assert!(gw.embed(&["x".to_string()]).is_err());
}

#[test]
fn embeddings_come_back_normalized_and_in_order() {
    let server = serve(Box::new(cooperative));
    let gw = gateway(&server.url);
    let texts = vec!["first".to_string(), "second".to_string()];
    let v = gw.embed(&texts).unwrap();
    assert!((v[0][0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    let n = (1.0f32 + 4.0).sqrt();
    assert!((v[1][1] - 2.0 / n).abs() < 1e-6);
    // Cached: a second call makes no request.
    gw.embed(&texts).unwrap();
    let requests = server.requests.lock().unwrap();
    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].0, "/v1/embeddings");
    assert_eq!(requests[0].1["model"], "text-embedding-3-small");
}
