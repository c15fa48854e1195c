use mhop_core::backend::{Backend, BackendError, Backoff, ChatMessage, HttpBackend};
use mhop_core::RunConfig;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

/// Serves one scripted status per connection; 200 replies carry a chat completion.
/// Returns the base URL and the raw requests received.
fn stub(statuses: Vec<u16>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for status in statuses {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(head + &String::from_utf8_lossy(&body));
            let payload = if status == 200 {
                r#"{"choices":[{"message":{"role":"assistant","content":"Final answer: Paris"}}]}"#
            } else {
                "upstream failure"
            };
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (url, seen)
}

fn config(endpoint: &str, retries: u32) -> RunConfig {
    RunConfig {
        endpoint: endpoint.into(),
        max_retries: retries,
        timeout_seconds: 5.0,
        ..RunConfig::default()
    }
}

fn fast() -> Backoff {
    Backoff {
        initial: Duration::from_millis(1),
        factor: 2.0,
        max: Duration::from_millis(5),
    }
}

fn ask(backend: &HttpBackend, cfg: &RunConfig) -> Result<String, BackendError> {
    backend.complete(&[ChatMessage::user("What is the capital of France?")], cfg)
}

#[test]
fn recovers_after_server_error() {
    let (url, seen) = stub(vec![500, 200]);
    let cfg = config(&url, 3);
    let backend = HttpBackend::new(&cfg).unwrap().with_backoff(fast()).with_api_key(Some("k".into()));
    assert_eq!(ask(&backend, &cfg).unwrap(), "Final answer: Paris");
    assert_eq!(backend.attempts(), 2);
    assert!(backend.attempts() as u32 <= 1 + cfg.max_retries);
    let seen = seen.lock().unwrap();
    assert!(seen[0].starts_with("POST /v1/chat/completions"));
    assert!(seen[0].to_ascii_lowercase().contains("authorization: bearer k"));
    assert!(seen[0].contains("\"temperature\":0"));
}

#[test]
fn rate_limit_is_retried() {
    let (url, _) = stub(vec![429, 429, 200]);
    let cfg = config(&url, 2);
    let backend = HttpBackend::new(&cfg).unwrap().with_backoff(fast());
    assert!(ask(&backend, &cfg).is_ok());
    assert_eq!(backend.attempts(), 3);
}

#[test]
fn gives_up_after_budget() {
    let (url, _) = stub(vec![500; 4]);
    let cfg = config(&url, 3);
    let backend = HttpBackend::new(&cfg).unwrap().with_backoff(fast());
    match ask(&backend, &cfg) {
        Err(BackendError::RetriesExhausted { attempts, last }) => {
            assert_eq!(attempts, 4);
            assert!(matches!(*last, BackendError::Http { status: 500, .. }));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(backend.attempts(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, _) = stub(vec![400, 200]);
    let cfg = config(&url, 3);
    let backend = HttpBackend::new(&cfg).unwrap().with_backoff(fast());
    assert!(matches!(ask(&backend, &cfg), Err(BackendError::Http { status: 400, .. })));
    assert_eq!(backend.attempts(), 1);
}
