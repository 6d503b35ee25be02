//! Integration tests for the HTTP backend against a local TCP stub server:
//! retry behavior on transient failures, fail-fast on client errors,
//! capability errors for missing logprobs, and seed threading in sampling.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use factcal::backend::{Backend, BackendError, CompletionRequest, HttpBackend, Message};

const SUCCESS_BODY: &str =
    r#"{"choices":[{"message":{"role":"assistant","content":"0.85"},"finish_reason":"stop"}]}"#;

/// What the stub sends back for one accepted connection.
enum Reply {
    /// A status with a plain-text body.
    Status(u16, &'static str),
    /// A 200 response with a JSON body.
    Json(&'static str),
    /// Read the request, then close the connection without responding.
    Drop,
}

/// Single-threaded HTTP stub: serves the scripted replies in order, one
/// connection each, recording every request it reads. The test must drive
/// exactly as many requests as there are replies, then call [`finish`].
struct StubServer {
    url: String,
    requests: Arc<Mutex<Vec<String>>>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    fn start(replies: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind an ephemeral port");
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&requests);
        let thread = std::thread::spawn(move || {
            for reply in replies {
                let Ok((mut stream, _)) = listener.accept() else { return };
                let request = read_http_request(&mut stream);
                seen.lock().unwrap().push(request);
                match reply {
                    Reply::Drop => {}
                    Reply::Status(status, body) => write_response(&mut stream, status, body),
                    Reply::Json(body) => write_response(&mut stream, 200, body),
                }
            }
        });
        Self { url: format!("http://{addr}"), requests, thread: Some(thread) }
    }

    /// Waits for the script to be fully consumed and returns the recorded
    /// requests.
    fn finish(mut self) -> Vec<String> {
        self.thread.take().unwrap().join().expect("stub server thread");
        let requests = self.requests.lock().unwrap();
        requests.clone()
    }
}

fn read_http_request(stream: &mut TcpStream) -> String {
    let mut bytes = Vec::new();
    let mut buf = [0u8; 1024];
    let header_end = loop {
        match stream.read(&mut buf) {
            Ok(0) => break bytes.len(),
            Ok(n) => {
                bytes.extend_from_slice(&buf[..n]);
                if let Some(at) = find_header_end(&bytes) {
                    break at;
                }
            }
            Err(_) => break bytes.len(),
        }
    };
    let head = String::from_utf8_lossy(&bytes[..header_end]).to_string();
    let content_length = head
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("content-length").then(|| value.trim().parse().ok())?
        })
        .unwrap_or(0usize);
    let body_start = header_end + 4;
    while bytes.len() < body_start + content_length {
        match stream.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => bytes.extend_from_slice(&buf[..n]),
        }
    }
    String::from_utf8_lossy(&bytes).to_string()
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    bytes.windows(4).position(|w| w == b"\r\n\r\n")
}

fn write_response(stream: &mut TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Status",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\n\
         Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(response.as_bytes());
}

fn request() -> CompletionRequest {
    CompletionRequest::new("subject-m", vec![Message::user("How confident are you?")])
}

#[test]
fn transient_server_errors_are_retried_until_success() {
    let server = StubServer::start(vec![
        Reply::Status(500, "overloaded"),
        Reply::Status(429, "slow down"),
        Reply::Json(SUCCESS_BODY),
    ]);
    let backend = HttpBackend::new(&server.url, Some("secret-token".to_string())).unwrap();
    let result = backend.complete(&request()).unwrap();
    assert_eq!(result.text, "0.85");

    let seen = server.finish();
    assert_eq!(seen.len(), 3, "two transient failures then a success");
    let first = seen[0].to_ascii_lowercase();
    assert!(first.starts_with("post /v1/chat/completions http/1.1"), "unexpected request line");
    assert!(first.contains("authorization: bearer secret-token"), "missing bearer credential");
    assert!(seen[0].contains(r#""model":"subject-m""#), "payload must carry the model id");
}

#[test]
fn dropped_connections_are_retried_as_transport_failures() {
    let server = StubServer::start(vec![Reply::Drop, Reply::Drop, Reply::Json(SUCCESS_BODY)]);
    let backend = HttpBackend::new(&server.url, None).unwrap();
    let result = backend.complete(&request()).unwrap();
    assert_eq!(result.text, "0.85");
    assert_eq!(server.finish().len(), 3);
}

#[test]
fn retries_stop_after_the_attempt_budget() {
    let server = StubServer::start(vec![
        Reply::Status(500, "down"),
        Reply::Status(500, "down"),
        Reply::Status(500, "down"),
    ]);
    let backend = HttpBackend::new(&server.url, None).unwrap();
    match backend.complete(&request()) {
        Err(BackendError::Transport { attempts, message }) => {
            assert_eq!(attempts, 3);
            assert!(message.contains("500"), "message should name the status: {message}");
        }
        other => panic!("expected a transport error, got {other:?}"),
    }
    assert_eq!(server.finish().len(), 3, "exactly the attempt budget, no more");
}

#[test]
fn client_errors_fail_fast_without_retry() {
    let server = StubServer::start(vec![Reply::Status(404, "no such route")]);
    let backend = HttpBackend::new(&server.url, None).unwrap();
    match backend.complete(&request()) {
        Err(BackendError::Api(message)) => {
            assert!(message.contains("404"), "message should name the status: {message}");
            assert!(message.contains("no such route"), "message should carry the body head");
        }
        other => panic!("expected an API error, got {other:?}"),
    }
    assert_eq!(server.finish().len(), 1, "4xx responses must not be retried");
}

#[test]
fn responses_without_requested_logprobs_fail_as_capability() {
    let server = StubServer::start(vec![Reply::Json(SUCCESS_BODY)]);
    let backend = HttpBackend::new(&server.url, None).unwrap();
    match backend.complete(&request().with_logprobs(8)) {
        Err(BackendError::Capability { backend, .. }) => assert_eq!(backend, "http"),
        other => panic!("expected a capability error, got {other:?}"),
    }
    assert_eq!(server.finish().len(), 1, "a parseable response is not retried");
}

#[test]
fn sampling_threads_distinct_seeds_per_draw() {
    let server = StubServer::start(vec![
        Reply::Json(SUCCESS_BODY),
        Reply::Json(SUCCESS_BODY),
        Reply::Json(SUCCESS_BODY),
    ]);
    let backend = HttpBackend::new(&server.url, None).unwrap();
    let seeded = request().with_temperature(1.0).with_seed(Some(7));
    let samples = backend.sample_n(&seeded, 3).unwrap();
    assert_eq!(samples.len(), 3);

    let seen = server.finish();
    for (index, expected_seed) in [7u64, 8, 9].iter().enumerate() {
        assert!(
            seen[index].contains(&format!(r#""seed":{expected_seed}"#)),
            "draw {index} should carry seed {expected_seed}"
        );
    }
}
