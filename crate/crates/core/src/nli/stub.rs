//! Minimal in-process HTTP server speaking the `POST /nli` protocol, for
//! conformance tests and offline demos of the remote backend.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Deserialize;

use super::NliLabel;

#[derive(Clone, Debug, Deserialize)]
pub struct StubRequest {
    pub premise: String,
    pub hypothesis: String,
}

/// What the stub sends back for one request.
#[derive(Clone, Debug)]
pub enum StubReply {
    Label(NliLabel),
    /// An HTTP error status with an empty body.
    Status(u16),
    /// A 200 response whose body is sent verbatim.
    Raw(String),
}

/// `(request, attempt)` → reply, where `attempt` counts previous requests
/// with the same premise and hypothesis (0 on first contact).
pub type Handler = dyn Fn(&StubRequest, usize) -> StubReply + Send + Sync;

struct Shared {
    handler: Box<Handler>,
    attempts: Mutex<HashMap<(String, String), usize>>,
    active: AtomicUsize,
    max_active: AtomicUsize,
    requests: AtomicUsize,
    delay: Duration,
    stop: AtomicBool,
}

pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral localhost port and serves until dropped.
    pub fn start<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(&StubRequest, usize) -> StubReply + Send + Sync + 'static,
    {
        StubServer::start_with_delay(handler, Duration::ZERO)
    }

    /// Like [`StubServer::start`], sleeping `delay` inside every request so
    /// concurrency limits become observable.
    pub fn start_with_delay<F>(handler: F, delay: Duration) -> std::io::Result<Self>
    where
        F: Fn(&StubRequest, usize) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            handler: Box::new(handler),
            attempts: Mutex::new(HashMap::new()),
            active: AtomicUsize::new(0),
            max_active: AtomicUsize::new(0),
            requests: AtomicUsize::new(0),
            delay,
            stop: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let s = Arc::clone(&s);
                std::thread::spawn(move || {
                    if let Err(e) = serve(stream, &s) {
                        log::debug!("stub connection error: {e}");
                    }
                });
            }
        });
        Ok(StubServer {
            addr,
            shared,
            thread: Some(thread),
        })
    }

    /// Base URL, e.g. `http://127.0.0.1:40123`.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Largest number of requests that were being handled at once.
    pub fn max_concurrent(&self) -> usize {
        self.shared.max_active.load(Ordering::SeqCst)
    }

    pub fn request_count(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let mut parts = request_line.split_whitespace();
    let (method, path) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    let mut stream = stream;
    if method != "POST" || path != "/nli" {
        return respond(&mut stream, 404, "");
    }
    let Ok(req) = serde_json::from_slice::<StubRequest>(&body) else {
        return respond(&mut stream, 400, "");
    };

    shared.requests.fetch_add(1, Ordering::SeqCst);
    let now = shared.active.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_active.fetch_max(now, Ordering::SeqCst);
    if !shared.delay.is_zero() {
        std::thread::sleep(shared.delay);
    }
    let attempt = {
        let mut map = shared.attempts.lock().expect("attempt map");
        let n = map.entry((req.premise.clone(), req.hypothesis.clone())).or_insert(0);
        *n += 1;
        *n - 1
    };
    let reply = (shared.handler)(&req, attempt);
    shared.active.fetch_sub(1, Ordering::SeqCst);
    match reply {
        StubReply::Label(label) => {
            let scores = match label {
                NliLabel::Entailment => [1.0, 0.0, 0.0],
                NliLabel::Neutral => [0.0, 1.0, 0.0],
                NliLabel::Contradiction => [0.0, 0.0, 1.0],
            };
            let body = serde_json::json!({ "label": label.as_str(), "scores": scores });
            respond(&mut stream, 200, &body.to_string())
        }
        StubReply::Status(code) => respond(&mut stream, code, ""),
        StubReply::Raw(body) => respond(&mut stream, 200, &body),
    }
}

fn respond(stream: &mut TcpStream, code: u16, body: &str) -> std::io::Result<()> {
    let reason = match code {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    write!(
        stream,
        "HTTP/1.1 {code} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}
