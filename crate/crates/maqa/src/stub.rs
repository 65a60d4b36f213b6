//! In-process stub service for exercising the HTTP client without a real
//! model server. Serves all four wire endpoints on a loopback port using
//! the deterministic local backends, and can inject failures (initial 500
//! responses, fixed response delay) for retry and timeout tests.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Response, Server};

use crate::backend::{
    EmbedderBackend, HashEmbedder, KeywordReader, KeywordRecaller, ReaderBackend, RecallerBackend,
    SupportContrastVerifier, VerifierBackend,
};
use crate::error::{MaqaError, Result};
use crate::metrics::Matcher;
use crate::service::{
    EmbedRequest, EmbedResponse, ReadRequest, ReadResponse, RecallRequest, RecallResponse,
    VerifyRequest, VerifyResponse, WirePassage,
};
use crate::types::Passage;

#[derive(Debug, Clone)]
pub struct StubOptions {
    /// Loopback port to bind; 0 picks a free one.
    pub port: u16,
    /// Embedding dimension served by /embed.
    pub dim: usize,
    /// Reply 500 to this many requests before serving normally.
    pub fail_first: u64,
    /// Fixed delay before answering each request.
    pub delay: Duration,
    /// Separator used by the stub reader.
    pub separator: String,
}

impl Default for StubOptions {
    fn default() -> Self {
        StubOptions {
            port: 0,
            dim: 32,
            fail_first: 0,
            delay: Duration::ZERO,
            separator: "[SEP]".to_string(),
        }
    }
}

pub struct StubServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    requests: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(options: StubOptions) -> Result<Self> {
        let server = Server::http(format!("127.0.0.1:{}", options.port))
            .map_err(|e| MaqaError::Config(format!("stub server failed to bind: {e}")))?;
        let addr = match server.server_addr() {
            tiny_http::ListenAddr::IP(a) => a,
            other => {
                return Err(MaqaError::Config(format!(
                    "stub server bound to non-IP address {other:?}"
                )))
            }
        };
        let shutdown = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicU64::new(0));
        let worker = StubWorker {
            embedder: HashEmbedder::new(options.dim),
            recaller: KeywordRecaller::new(Matcher::default()),
            verifier: SupportContrastVerifier::new(Matcher::default()),
            reader: KeywordReader::new(Matcher::default(), options.separator.clone()),
            options,
            requests: Arc::clone(&requests),
        };
        let stop = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(request)) => worker.handle(request),
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });
        Ok(StubServer {
            addr,
            shutdown,
            requests,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Total requests received, including injected failures.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

struct StubWorker {
    options: StubOptions,
    embedder: HashEmbedder,
    recaller: KeywordRecaller,
    verifier: SupportContrastVerifier,
    reader: KeywordReader,
    requests: Arc<AtomicU64>,
}

enum Reply {
    Json(String),
    Error(u16, String),
}

impl StubWorker {
    fn handle(&self, mut request: tiny_http::Request) {
        let seen = self.requests.fetch_add(1, Ordering::SeqCst);
        if !self.options.delay.is_zero() {
            std::thread::sleep(self.options.delay);
        }
        let reply = if seen < self.options.fail_first {
            Reply::Error(500, "injected failure".to_string())
        } else if request.method() != &Method::Post {
            Reply::Error(405, format!("method {} not allowed", request.method()))
        } else {
            let mut body = String::new();
            match request.as_reader().read_to_string(&mut body) {
                Ok(_) => self.dispatch(request.url(), &body),
                Err(e) => Reply::Error(400, format!("unreadable body: {e}")),
            }
        };
        let (status, payload) = match reply {
            Reply::Json(json) => (200, json),
            Reply::Error(code, message) => {
                (code, format!("{{\"error\":{}}}", serde_json::Value::from(message)))
            }
        };
        let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
            .expect("static header");
        let response = Response::from_string(payload)
            .with_status_code(status)
            .with_header(header);
        let _ = request.respond(response);
    }

    fn dispatch(&self, path: &str, body: &str) -> Reply {
        match path {
            "/embed" => with_request(body, |req: EmbedRequest| {
                let vectors = self.embedder.embed(&req.texts)?;
                Ok(EmbedResponse { vectors })
            }),
            "/recall" => with_request(body, |req: RecallRequest| {
                let passages = wire_passages(&req.passages)?;
                let answers = self.recaller.recall(&req.question, &passages)?;
                Ok(RecallResponse { answers })
            }),
            "/verify" => with_request(body, |req: VerifyRequest| {
                let passages = wire_passages(&req.passages)?;
                let logits = self.verifier.verify(&req.question, &req.candidate, &passages)?;
                Ok(VerifyResponse {
                    logit_right: logits.logit_right,
                    logit_wrong: logits.logit_wrong,
                })
            }),
            "/read" => with_request(body, |req: ReadRequest| {
                let passages = wire_passages(&req.passages)?;
                let text = self.reader.read(&req.question, &passages)?;
                Ok(ReadResponse { text })
            }),
            other => Reply::Error(404, format!("unknown endpoint {other}")),
        }
    }
}

fn with_request<Req, Resp, F>(body: &str, f: F) -> Reply
where
    Req: DeserializeOwned,
    Resp: Serialize,
    F: FnOnce(Req) -> Result<Resp>,
{
    let req: Req = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return Reply::Error(400, format!("malformed request: {e}")),
    };
    match f(req) {
        Ok(resp) => match serde_json::to_string(&resp) {
            Ok(json) => Reply::Json(json),
            Err(e) => Reply::Error(500, format!("serialization failed: {e}")),
        },
        Err(e) => Reply::Error(400, e.to_string()),
    }
}

fn wire_passages(wire: &[WirePassage]) -> Result<Vec<Passage>> {
    wire.iter()
        .enumerate()
        .map(|(i, p)| Passage::new(i as u64, p.title.clone(), p.text.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::RecallerOutput;
    use crate::service::{ServiceClient, ServiceConfig};

    fn client_for(server: &StubServer) -> ServiceClient {
        let mut config = ServiceConfig::new(server.base_url());
        config.backoff = Duration::from_millis(5);
        ServiceClient::new(config).unwrap()
    }

    #[test]
    fn serves_all_endpoints() {
        let server = StubServer::start(StubOptions::default()).unwrap();
        let client = client_for(&server);

        let vectors = client
            .embed(&["alpha".to_string(), "beta".to_string()])
            .unwrap();
        assert_eq!(vectors.len(), 2);
        assert_eq!(vectors[0].len(), 32);
        assert_ne!(vectors[0], vectors[1]);

        let passages = vec![
            Passage::new(0, "", "the capital city is Paris today").unwrap(),
            Passage::new(1, "", "records agree that Paris is the capital city").unwrap(),
            Passage::new(2, "", "nothing relevant here at all").unwrap(),
        ];
        let answers = client.recall("which capital city?", &passages).unwrap();
        assert_eq!(answers.len(), 3);
        assert!(matches!(answers[0], RecallerOutput::Answers(_)));

        let logits = client.verify("which capital city?", "Paris", &passages).unwrap();
        assert!(logits.logit_right > logits.logit_wrong);

        let text = client.read("which capital city?", &passages).unwrap();
        assert!(!text.is_empty());
        assert!(server.request_count() >= 4);
    }

    #[test]
    fn retries_through_injected_failures() {
        let server = StubServer::start(StubOptions {
            fail_first: 2,
            ..StubOptions::default()
        })
        .unwrap();
        let client = client_for(&server);
        let vectors = client.embed(&["gamma".to_string()]).unwrap();
        assert_eq!(vectors.len(), 1);
        assert_eq!(server.request_count(), 3);
    }

    #[test]
    fn gives_up_when_failures_exceed_retries() {
        let server = StubServer::start(StubOptions {
            fail_first: 10,
            ..StubOptions::default()
        })
        .unwrap();
        let client = client_for(&server);
        match client.embed(&["delta".to_string()]) {
            Err(MaqaError::Service { attempts, message, .. }) => {
                assert_eq!(attempts, 3);
                assert!(message.contains("500"), "message: {message}");
            }
            other => panic!("expected service error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_unknown_requests_fail_without_retry() {
        let server = StubServer::start(StubOptions::default()).unwrap();
        let mut config = ServiceConfig::new(server.base_url());
        config.backoff = Duration::from_millis(5);
        let client = ServiceClient::new(config).unwrap();
        // Recall of zero passages round-trips fine; an unknown path is 404
        // and must not be retried.
        let before = server.request_count();
        let err = ureq::post(&format!("{}/unknown", server.base_url()))
            .send_json(serde_json::json!({}))
            .unwrap_err();
        match err {
            ureq::Error::Status(code, _) => assert_eq!(code, 404),
            other => panic!("expected status error, got {other:?}"),
        }
        assert_eq!(server.request_count(), before + 1);
        drop(client);
    }

    #[test]
    fn delay_beyond_timeout_times_out() {
        let server = StubServer::start(StubOptions {
            delay: Duration::from_millis(400),
            ..StubOptions::default()
        })
        .unwrap();
        let mut config = ServiceConfig::new(server.base_url());
        config.timeout = Duration::from_millis(50);
        config.retries = 0;
        let client = ServiceClient::new(config).unwrap();
        match client.embed(&["epsilon".to_string()]) {
            Err(MaqaError::Service { attempts, .. }) => assert_eq!(attempts, 1),
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn batching_splits_requests() {
        let server = StubServer::start(StubOptions::default()).unwrap();
        let mut config = ServiceConfig::new(server.base_url());
        config.max_batch = 2;
        let client = ServiceClient::new(config).unwrap();
        let texts: Vec<String> = (0..5).map(|i| format!("text {i}")).collect();
        let vectors = client.embed(&texts).unwrap();
        assert_eq!(vectors.len(), 5);
        assert_eq!(server.request_count(), 3);
    }
}
