//! HTTP client for model services speaking the JSON wire protocol:
//!
//! ```text
//! POST /embed   {"texts": [...]}                          -> {"vectors": [[f32, ...], ...]}
//! POST /recall  {"question", "passages": [{title,text}]}  -> {"answers": [[...] | "IRRELEVANT", ...]}
//! POST /verify  {"question", "candidate", "passages"}     -> {"logit_right", "logit_wrong"}
//! POST /read    {"question", "passages"}                  -> {"text"}
//! ```
//!
//! Transport failures and 5xx responses are retried with exponential
//! backoff; 4xx responses are not (the request will not get better).

use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::{EmbedderBackend, ReaderBackend, RecallerBackend, VerifierBackend};
use crate::error::{MaqaError, Result};
use crate::pipeline::{RecallerOutput, VerifierLogits};
use crate::types::{BackendKind, BackendMetadata, Passage};

/// Environment variable naming the service base URL.
pub const SERVICE_URL_ENV: &str = "MAQA_SERVICE_URL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub base_url: String,
    /// Per-request timeout.
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub retries: u32,
    /// Initial backoff between attempts; doubles each retry.
    pub backoff: Duration,
    /// Maximum texts per /embed request.
    pub max_batch: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            base_url: String::new(),
            timeout: Duration::from_secs(60),
            retries: 2,
            backoff: Duration::from_millis(250),
            max_batch: 32,
        }
    }
}

impl ServiceConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        ServiceConfig {
            base_url: base_url.into(),
            ..ServiceConfig::default()
        }
    }

    /// Base URL from `MAQA_SERVICE_URL`, when set and non-empty.
    pub fn from_env() -> Option<Self> {
        match std::env::var(SERVICE_URL_ENV) {
            Ok(url) if !url.trim().is_empty() => Some(ServiceConfig::new(url.trim())),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_url.trim().is_empty() {
            return Err(MaqaError::Config("service base URL is empty".to_string()));
        }
        if self.max_batch == 0 {
            return Err(MaqaError::Config("max batch must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Passage shape on the wire: title and text only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePassage {
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl From<&Passage> for WirePassage {
    fn from(p: &Passage) -> Self {
        WirePassage {
            title: p.title.clone(),
            text: p.text.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallRequest {
    pub question: String,
    pub passages: Vec<WirePassage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallResponse {
    pub answers: Vec<RecallerOutput>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub question: String,
    pub candidate: String,
    pub passages: Vec<WirePassage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub logit_right: f64,
    pub logit_wrong: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReadRequest {
    pub question: String,
    pub passages: Vec<WirePassage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReadResponse {
    pub text: String,
}

#[derive(Debug)]
pub struct ServiceClient {
    config: ServiceConfig,
    agent: ureq::Agent,
}

impl ServiceClient {
    pub fn new(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(config.timeout)
            .build();
        Ok(ServiceClient { config, agent })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = self.endpoint(path);
        let mut delay = self.config.backoff;
        let mut last_error = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.agent.post(&url).send_json(body) {
                Ok(resp) => {
                    return resp.into_json().map_err(|e| MaqaError::Service {
                        url: url.clone(),
                        attempts: attempt + 1,
                        message: format!("malformed response body: {e}"),
                    });
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let body = resp.into_string().unwrap_or_default();
                    last_error = format!("HTTP {code}: {}", body.trim());
                    if (400..500).contains(&code) {
                        return Err(MaqaError::Service {
                            url,
                            attempts: attempt + 1,
                            message: last_error,
                        });
                    }
                }
                Err(ureq::Error::Transport(t)) => {
                    last_error = format!("transport: {t}");
                }
            }
        }
        Err(MaqaError::Service {
            url,
            attempts: self.config.retries + 1,
            message: last_error,
        })
    }

    /// Embed texts, chunking requests at the configured batch size.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut vectors = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.max_batch.max(1)) {
            let resp: EmbedResponse = self.post(
                "/embed",
                &EmbedRequest {
                    texts: chunk.to_vec(),
                },
            )?;
            if resp.vectors.len() != chunk.len() {
                return Err(MaqaError::backend(
                    "embedder",
                    format!(
                        "service returned {} vectors for {} texts",
                        resp.vectors.len(),
                        chunk.len()
                    ),
                ));
            }
            vectors.extend(resp.vectors);
        }
        if let Some(first) = vectors.first() {
            let dim = first.len();
            if vectors.iter().any(|v| v.len() != dim) {
                return Err(MaqaError::backend(
                    "embedder",
                    "service returned vectors of mixed dimensions",
                ));
            }
        }
        Ok(vectors)
    }

    pub fn recall(&self, question: &str, passages: &[Passage]) -> Result<Vec<RecallerOutput>> {
        let resp: RecallResponse = self.post(
            "/recall",
            &RecallRequest {
                question: question.to_string(),
                passages: passages.iter().map(WirePassage::from).collect(),
            },
        )?;
        if resp.answers.len() != passages.len() {
            return Err(MaqaError::backend(
                "recaller",
                format!(
                    "service returned {} answer lists for {} passages",
                    resp.answers.len(),
                    passages.len()
                ),
            ));
        }
        Ok(resp.answers)
    }

    pub fn verify(&self, question: &str, candidate: &str, passages: &[Passage]) -> Result<VerifierLogits> {
        let resp: VerifyResponse = self.post(
            "/verify",
            &VerifyRequest {
                question: question.to_string(),
                candidate: candidate.to_string(),
                passages: passages.iter().map(WirePassage::from).collect(),
            },
        )?;
        VerifierLogits::new(resp.logit_right, resp.logit_wrong)
    }

    pub fn read(&self, question: &str, passages: &[Passage]) -> Result<String> {
        let resp: ReadResponse = self.post(
            "/read",
            &ReadRequest {
                question: question.to_string(),
                passages: passages.iter().map(WirePassage::from).collect(),
            },
        )?;
        Ok(resp.text)
    }
}

fn service_metadata(kind: BackendKind, client: &ServiceClient) -> BackendMetadata {
    let mut meta = BackendMetadata::new(kind, format!("service:{}", client.config.base_url));
    meta.concurrent_safe = true;
    meta
}

/// Embedder backed by the /embed endpoint.
#[derive(Debug, Clone)]
pub struct ServiceEmbedder {
    client: Arc<ServiceClient>,
}

impl ServiceEmbedder {
    pub fn new(client: Arc<ServiceClient>) -> Self {
        ServiceEmbedder { client }
    }
}

impl EmbedderBackend for ServiceEmbedder {
    fn metadata(&self) -> BackendMetadata {
        service_metadata(BackendKind::Embedder, &self.client)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        self.client.embed(texts)
    }
}

/// Recaller backed by the /recall endpoint.
#[derive(Debug, Clone)]
pub struct ServiceRecaller {
    client: Arc<ServiceClient>,
}

impl ServiceRecaller {
    pub fn new(client: Arc<ServiceClient>) -> Self {
        ServiceRecaller { client }
    }
}

impl RecallerBackend for ServiceRecaller {
    fn metadata(&self) -> BackendMetadata {
        service_metadata(BackendKind::Recaller, &self.client)
    }

    fn recall(&self, question: &str, passages: &[Passage]) -> Result<Vec<RecallerOutput>> {
        self.client.recall(question, passages)
    }
}

/// Verifier backed by the /verify endpoint.
#[derive(Debug, Clone)]
pub struct ServiceVerifier {
    client: Arc<ServiceClient>,
}

impl ServiceVerifier {
    pub fn new(client: Arc<ServiceClient>) -> Self {
        ServiceVerifier { client }
    }
}

impl VerifierBackend for ServiceVerifier {
    fn metadata(&self) -> BackendMetadata {
        service_metadata(BackendKind::Verifier, &self.client)
    }

    fn verify(&self, question: &str, candidate: &str, passages: &[Passage]) -> Result<VerifierLogits> {
        self.client.verify(question, candidate, passages)
    }
}

/// Reader backed by the /read endpoint.
#[derive(Debug, Clone)]
pub struct ServiceReader {
    client: Arc<ServiceClient>,
}

impl ServiceReader {
    pub fn new(client: Arc<ServiceClient>) -> Self {
        ServiceReader { client }
    }
}

impl ReaderBackend for ServiceReader {
    fn metadata(&self) -> BackendMetadata {
        service_metadata(BackendKind::Reader, &self.client)
    }

    fn read(&self, question: &str, passages: &[Passage]) -> Result<String> {
        self.client.read(question, passages)
    }
}
