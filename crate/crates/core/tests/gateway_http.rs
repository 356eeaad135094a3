//! Remote and replay backends against a scripted local HTTP server.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::{Arc, Mutex, Once};
use std::thread;

use ir2::gateway::{
    load_records, BackendConfig, BackendKind, Gateway, GatewayError, GenerationRequest, PromptTemplate, TemplateKind,
    TemplateStore, API_KEY_ENV,
};
use serde_json::Value;

struct Seen {
    authorization: String,
    body: Value,
}

/// Serve one scripted `(status, body)` response per connection, then stop.
fn serve(script: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let (mut len, mut auth) = (0, String::new());
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = value.trim().to_string(),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { authorization: auth, body: serde_json::from_slice(&buf).unwrap() });
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn set_key() {
    static KEY: Once = Once::new();
    KEY.call_once(|| std::env::set_var(API_KEY_ENV, "test-key"));
}

fn remote(url: &str, records: &Path) -> Gateway {
    set_key();
    let cfg = BackendConfig {
        kind: BackendKind::Remote,
        endpoint: Some(url.to_string()),
        max_retries: 2,
        backoff_ms: 1,
        timeout_secs: 5.0,
        records: Some(records.to_path_buf()),
        ..BackendConfig::default()
    };
    Gateway::new(cfg, TemplateStore::builtin()).unwrap()
}

fn ask(gw: &Gateway, doc: &str) -> Result<String, GatewayError> {
    let t = PromptTemplate::parse("test/promptagator", TemplateKind::Promptagator, "Document: {document}\nQuery:");
    let slots = BTreeMap::from([("document".to_string(), doc.to_string())]);
    gw.generate(&GenerationRequest::new(&t, slots)).map(|c| c.text)
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"aurora borealis causes"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#;

#[test]
fn retries_server_errors_then_records_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    let (url, seen) = serve(vec![(500, r#"{"error":{"message":"overloaded"}}"#), (429, "slow down"), (200, OK)]);
    let gw = remote(&url, &records);
    assert_eq!(ask(&gw, "Auroras form when solar wind meets the magnetosphere.").unwrap(), "aurora borealis causes");

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|s| s.authorization == "Bearer test-key"));
    let body = &seen[2].body;
    assert_eq!(body["model"], "gpt-4-0613");
    assert_eq!(body["messages"][0]["role"], "user");
    assert!(body["messages"][0]["content"].as_str().unwrap().contains("solar wind"));

    let usage = gw.usage();
    assert_eq!((usage["gpt-4-0613"].calls, usage["gpt-4-0613"].prompt_tokens), (1, 12));
    let recs = load_records(&records).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!((recs[0].backend.as_str(), recs[0].completion_tokens), ("remote", 3));

    let replay = Gateway::new(
        BackendConfig { kind: BackendKind::Replay, records: Some(records.clone()), ..BackendConfig::default() },
        TemplateStore::builtin(),
    )
    .unwrap();
    assert_eq!(ask(&replay, "Auroras form when solar wind meets the magnetosphere.").unwrap(), "aurora borealis causes");
    assert!(matches!(ask(&replay, "A different document."), Err(GatewayError::ReplayMiss { .. })));
}

#[test]
fn client_errors_fail_immediately_with_provider_message() {
    let dir = tempfile::tempdir().unwrap();
    let (url, seen) = serve(vec![(400, r#"{"error":{"message":"model not found"}}"#)]);
    let gw = remote(&url, &dir.path().join("r.jsonl"));
    match ask(&gw, "text") {
        Err(GatewayError::Api { status, message }) => assert_eq!((status, message.as_str()), (400, "model not found")),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert!(gw.usage().is_empty());
}

#[test]
fn gives_up_after_retry_budget() {
    let dir = tempfile::tempdir().unwrap();
    let (url, seen) = serve(vec![(503, "down"); 3]);
    let gw = remote(&url, &dir.path().join("r.jsonl"));
    match ask(&gw, "text") {
        Err(GatewayError::Transport { attempts, message }) => {
            assert_eq!(attempts, 3);
            assert!(message.contains("503"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn malformed_success_body_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let (url, _) = serve(vec![(200, r#"{"choices":[]}"#)]);
    let gw = remote(&url, &dir.path().join("r.jsonl"));
    assert!(matches!(ask(&gw, "text"), Err(GatewayError::Parse { .. })));
}

#[test]
fn remote_without_credentials_is_rejected_by_config() {
    let cfg = BackendConfig { kind: BackendKind::Remote, endpoint: None, ..BackendConfig::default() };
    assert!(matches!(Gateway::new(cfg, TemplateStore::builtin()), Err(GatewayError::Config(_))));
}
