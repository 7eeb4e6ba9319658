//! Abstract contract to a model server returning choice probabilities and
//! text embeddings, plus the concrete backends: a wire client, a
//! deterministic mock, and a fixture-replay backend.
//!
//! Wire protocol:
//!   POST /v1/choice_prob  {"input": string, "choices": [string...]}
//!                      -> {"probs": [number...]}
//!   POST /v1/embed        {"texts": [string...]}
//!                      -> {"embeddings": [[number...]...]}
//!
//! Probabilities are accepted unnormalized; P(Yes)+P(No) need not sum to 1.
//! Servers must resolve tokenizer-specific multi-token renderings of the
//! choice words themselves; this client treats choices as opaque strings.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MOCK_EMBED_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceProbRequest {
    pub input: String,
    pub choices: Vec<String>,
}

impl ChoiceProbRequest {
    pub fn new(input: impl Into<String>, choices: Vec<String>) -> Result<Self> {
        let req = ChoiceProbRequest {
            input: input.into(),
            choices,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn yes_no(input: impl Into<String>) -> Self {
        ChoiceProbRequest {
            input: input.into(),
            choices: vec!["Yes".to_string(), "No".to_string()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() {
            return Err(Error::Validation("choice_prob input is empty".into()));
        }
        if self.choices.len() < 2 {
            return Err(Error::Validation("choice_prob needs at least 2 choices".into()));
        }
        let mut distinct = self.choices.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() != self.choices.len() {
            return Err(Error::Validation("choice_prob choices must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceProbResponse {
    pub probs: Vec<f64>,
}

impl ChoiceProbResponse {
    pub fn validate(&self, choices: usize) -> Result<()> {
        if self.probs.len() != choices {
            return Err(Error::Backend(format!(
                "response has {} probs for {} choices",
                self.probs.len(),
                choices
            )));
        }
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Backend("response contains a negative or non-finite probability".into()));
        }
        if self.probs.iter().all(|p| *p == 0.0) {
            return Err(Error::Backend("all choice probabilities are zero".into()));
        }
        Ok(())
    }
}

/// Retry policy for the wire client: transport errors only, never
/// well-formed error replies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 100,
        }
    }
}

/// Backend selection, as it appears in config files and CLI flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    Wire {
        endpoint: String,
        /// Name of the environment variable holding the auth token; the
        /// token itself never appears in config.
        #[serde(default)]
        auth_token_env: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default)]
        retry: RetryPolicy,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
    Mock {
        seed: u64,
    },
    Replay {
        fixture_path: String,
        #[serde(default = "default_true")]
        strict: bool,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_in_flight() -> usize {
    8
}

fn default_true() -> bool {
    true
}

impl BackendKind {
    pub fn build(&self) -> Result<Box<dyn Backend>> {
        match self {
            BackendKind::Wire {
                endpoint,
                auth_token_env,
                timeout_ms,
                retry,
                max_in_flight,
            } => Ok(Box::new(WireBackend::new(
                endpoint.clone(),
                auth_token_env.clone(),
                Duration::from_millis(*timeout_ms),
                retry.clone(),
                *max_in_flight,
            )?)),
            BackendKind::Mock { seed } => Ok(Box::new(MockBackend::new(*seed))),
            BackendKind::Replay {
                fixture_path,
                strict,
            } => Ok(Box::new(ReplayBackend::load(fixture_path, *strict)?)),
        }
    }
}

/// Probability-query + embedding interface to any model server.
pub trait Backend: Send + Sync {
    fn provider_id(&self) -> String;
    fn choice_prob(&self, req: &ChoiceProbRequest) -> Result<ChoiceProbResponse>;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

fn hash_u64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic local backend. Choice probabilities come from a keyed
/// hash of (seed, input, choice); embeddings hash token multisets into
/// fixed-dimension signed count vectors.
#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend { seed }
    }
}

impl Backend for MockBackend {
    fn provider_id(&self) -> String {
        format!("mock:{}", self.seed)
    }

    fn choice_prob(&self, req: &ChoiceProbRequest) -> Result<ChoiceProbResponse> {
        req.validate()?;
        let probs = req
            .choices
            .iter()
            .map(|choice| {
                let h = hash_u64(&[
                    &self.seed.to_le_bytes(),
                    req.input.as_bytes(),
                    choice.as_bytes(),
                ]);
                // strictly positive, strictly below 1
                ((h >> 11) as f64 + 1.0) / ((1u64 << 53) as f64 + 2.0)
            })
            .collect();
        let resp = ChoiceProbResponse { probs };
        resp.validate(req.choices.len())?;
        Ok(resp)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|text| {
                let mut v = vec![0.0f64; MOCK_EMBED_DIM];
                for token in text.to_lowercase().split_whitespace() {
                    let h = hash_u64(&[b"embed", token.as_bytes()]);
                    let idx = (h % MOCK_EMBED_DIM as u64) as usize;
                    let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
                    v[idx] += sign;
                }
                if v.iter().all(|x| *x == 0.0) {
                    // token signs may cancel; fall back to a text-level bucket
                    let h = hash_u64(&[b"embed-text", text.as_bytes()]);
                    v[(h % MOCK_EMBED_DIM as u64) as usize] = 1.0;
                }
                Ok(v)
            })
            .collect()
    }
}

/// One captured request/response pair in a fixture file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub hash: String,
    pub endpoint: String,
    pub request: Value,
    pub response: Value,
}

pub fn request_hash(endpoint: &str, request: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(endpoint.as_bytes());
    hasher.update([0u8]);
    hasher.update(serde_json::to_string(request).expect("serializable").as_bytes());
    format!("{:x}", hasher.finalize())
}

/// Serves recorded responses. In strict mode any request absent from the
/// fixture file is an error; otherwise misses fall through to a
/// deterministic mock (seed 0).
pub struct ReplayBackend {
    path: String,
    strict: bool,
    responses: HashMap<String, Value>,
    fallback: MockBackend,
}

impl ReplayBackend {
    pub fn load(path: impl AsRef<Path>, strict: bool) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut responses = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            responses.insert(record.hash, record.response);
        }
        Ok(ReplayBackend {
            path: path.display().to_string(),
            strict,
            responses,
            fallback: MockBackend::new(0),
        })
    }

    fn lookup(&self, endpoint: &str, request: &Value) -> Option<&Value> {
        self.responses.get(&request_hash(endpoint, request))
    }
}

impl Backend for ReplayBackend {
    fn provider_id(&self) -> String {
        format!("replay:{}", self.path)
    }

    fn choice_prob(&self, req: &ChoiceProbRequest) -> Result<ChoiceProbResponse> {
        req.validate()?;
        let body = serde_json::to_value(req).expect("serializable");
        match self.lookup("choice_prob", &body) {
            Some(value) => {
                let resp: ChoiceProbResponse = serde_json::from_value(value.clone())
                    .map_err(|e| Error::Backend(format!("malformed fixture response: {e}")))?;
                resp.validate(req.choices.len())?;
                Ok(resp)
            }
            None if self.strict => Err(Error::FixtureMiss(format!(
                "choice_prob input {:?}...",
                req.input.chars().take(60).collect::<String>()
            ))),
            None => self.fallback.choice_prob(req),
        }
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = serde_json::json!({ "texts": texts });
        match self.lookup("embed", &body) {
            Some(value) => {
                let resp: EmbedResponse = serde_json::from_value(value.clone())
                    .map_err(|e| Error::Backend(format!("malformed fixture response: {e}")))?;
                if resp.embeddings.len() != texts.len() {
                    return Err(Error::Backend(format!(
                        "fixture has {} embeddings for {} texts",
                        resp.embeddings.len(),
                        texts.len()
                    )));
                }
                Ok(resp.embeddings)
            }
            None if self.strict => Err(Error::FixtureMiss(format!("embed batch of {}", texts.len()))),
            None => self.fallback.embed(texts),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedRequest {
    texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Counting semaphore bounding in-flight wire requests.
struct InFlightGate {
    available: Mutex<usize>,
    cond: Condvar,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate {
            available: Mutex::new(limit.max(1)),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cond.wait(n).unwrap();
        }
        *n -= 1;
    }

    fn release(&self) {
        *self.available.lock().unwrap() += 1;
        self.cond.notify_one();
    }
}

/// HTTP client speaking the wire protocol, with bounded in-flight requests
/// and retries on transport errors.
pub struct WireBackend {
    endpoint: String,
    auth_token: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
}

impl WireBackend {
    pub fn new(
        endpoint: String,
        auth_token_env: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Result<Self> {
        let auth_token = match auth_token_env {
            Some(var) => Some(std::env::var(&var).map_err(|_| {
                Error::Backend(format!("auth token environment variable '{var}' is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(WireBackend {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            auth_token,
            retry,
            client,
            gate: InFlightGate::new(max_in_flight),
        })
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp> {
        self.gate.acquire();
        let result = self.post_inner(path, body);
        self.gate.release();
        result
    }

    fn post_inner<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp> {
        let url = format!("{}{}", self.endpoint, path);
        let mut backoff = Duration::from_millis(self.retry.initial_backoff_ms);
        let mut last_err = None;
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(token) = &self.auth_token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                // a well-formed reply, success or error status, ends retrying
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| Error::Backend(e.to_string()))?;
                    if !status.is_success() {
                        return Err(Error::Backend(format!("server replied {status}: {text}")));
                    }
                    return serde_json::from_str(&text)
                        .map_err(|e| Error::Backend(format!("malformed server reply: {e}")));
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::Backend(format!(
            "transport failure after {} attempts: {}",
            self.retry.attempts,
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )))
    }
}

impl Backend for WireBackend {
    fn provider_id(&self) -> String {
        format!("wire:{}", self.endpoint)
    }

    fn choice_prob(&self, req: &ChoiceProbRequest) -> Result<ChoiceProbResponse> {
        req.validate()?;
        let resp: ChoiceProbResponse = self.post("/v1/choice_prob", req)?;
        resp.validate(req.choices.len())?;
        Ok(resp)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let resp: EmbedResponse = self.post(
            "/v1/embed",
            &EmbedRequest {
                texts: texts.to_vec(),
            },
        )?;
        if resp.embeddings.len() != texts.len() {
            return Err(Error::Backend(format!(
                "server returned {} embeddings for {} texts",
                resp.embeddings.len(),
                texts.len()
            )));
        }
        Ok(resp.embeddings)
    }
}

/// Wrapper that captures every request/response pair so a run can be
/// replayed bit-exactly, and that counts requests for tests.
pub struct RecordingBackend<B: Backend> {
    inner: B,
    log: Mutex<Vec<FixtureRecord>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn records(&self) -> Vec<FixtureRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn choice_prob_count(&self) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.endpoint == "choice_prob")
            .count()
    }

    pub fn write_fixture(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for record in self.log.lock().unwrap().iter() {
            let line = serde_json::to_string(record).expect("serializable");
            writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn provider_id(&self) -> String {
        self.inner.provider_id()
    }

    fn choice_prob(&self, req: &ChoiceProbRequest) -> Result<ChoiceProbResponse> {
        let resp = self.inner.choice_prob(req)?;
        let request = serde_json::to_value(req).expect("serializable");
        self.log.lock().unwrap().push(FixtureRecord {
            hash: request_hash("choice_prob", &request),
            endpoint: "choice_prob".into(),
            request,
            response: serde_json::to_value(&resp).expect("serializable"),
        });
        Ok(resp)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let embeddings = self.inner.embed(texts)?;
        let request = serde_json::json!({ "texts": texts });
        self.log.lock().unwrap().push(FixtureRecord {
            hash: request_hash("embed", &request),
            endpoint: "embed".into(),
            request,
            response: serde_json::json!({ "embeddings": embeddings }),
        });
        Ok(embeddings)
    }
}

impl Backend for Box<dyn Backend> {
    fn provider_id(&self) -> String {
        (**self).provider_id()
    }
    fn choice_prob(&self, req: &ChoiceProbRequest) -> Result<ChoiceProbResponse> {
        (**self).choice_prob(req)
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        (**self).embed(texts)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn provider_id(&self) -> String {
        (**self).provider_id()
    }
    fn choice_prob(&self, req: &ChoiceProbRequest) -> Result<ChoiceProbResponse> {
        (**self).choice_prob(req)
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        (**self).embed(texts)
    }
}

pub mod server {
    //! Minimal HTTP server exposing any [`Backend`] over the wire protocol.

    use std::net::SocketAddr;
    use std::sync::Arc;

    use axum::extract::State;
    use axum::http::StatusCode;
    use axum::routing::post;
    use axum::{Json, Router};
    use serde_json::json;

    use super::{Backend, ChoiceProbRequest, EmbedRequest};
    use crate::error::Error;

    type Shared = Arc<dyn Backend>;

    fn status_for(err: &Error) -> StatusCode {
        match err {
            Error::FixtureMiss(_) => StatusCode::NOT_FOUND,
            Error::Validation(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    async fn choice_prob(
        State(backend): State<Shared>,
        Json(req): Json<ChoiceProbRequest>,
    ) -> Result<Json<serde_json::Value>, (StatusCode, String)> {
        let resp = tokio::task::spawn_blocking(move || backend.choice_prob(&req))
            .await
            .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
            .map_err(|e| (status_for(&e), e.to_string()))?;
        Ok(Json(json!({ "probs": resp.probs })))
    }

    async fn embed(
        State(backend): State<Shared>,
        Json(req): Json<EmbedRequest>,
    ) -> Result<Json<serde_json::Value>, (StatusCode, String)> {
        let resp = tokio::task::spawn_blocking(move || backend.embed(&req.texts))
            .await
            .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
            .map_err(|e| (status_for(&e), e.to_string()))?;
        Ok(Json(json!({ "embeddings": resp })))
    }

    pub fn router(backend: Shared) -> Router {
        Router::new()
            .route("/v1/choice_prob", post(choice_prob))
            .route("/v1/embed", post(embed))
            .with_state(backend)
    }

    /// Serve until the process is killed. Prints the bound address on
    /// stdout so callers can pick an ephemeral port with `:0`.
    pub fn serve(addr: SocketAddr, backend: Shared) -> crate::error::Result<()> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::bind(addr)
                .await
                .map_err(|e| Error::Backend(format!("bind {addr}: {e}")))?;
            let local = listener.local_addr().map_err(|e| Error::Backend(e.to_string()))?;
            println!("listening on http://{local}");
            axum::serve(listener, router(backend))
                .await
                .map_err(|e| Error::Backend(e.to_string()))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_is_deterministic() {
        let backend = MockBackend::new(7);
        let req = ChoiceProbRequest::yes_no("same input");
        let a = backend.choice_prob(&req).unwrap();
        let b = backend.choice_prob(&req).unwrap();
        assert_eq!(a, b);
        assert!(a.probs.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn mock_seed_changes_probs() {
        let req = ChoiceProbRequest::yes_no("same input");
        let a = MockBackend::new(1).choice_prob(&req).unwrap();
        let b = MockBackend::new(2).choice_prob(&req).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mock_embed_shape_and_identity() {
        let backend = MockBackend::new(7);
        let vs = backend
            .embed(&["a".to_string(), "a".to_string(), "b".to_string()])
            .unwrap();
        assert_eq!(vs.len(), 3);
        assert!(vs.iter().all(|v| v.len() == MOCK_EMBED_DIM));
        assert_eq!(vs[0], vs[1]);
        assert!(vs.iter().all(|v| v.iter().any(|x| *x != 0.0)));
    }

    #[test]
    fn request_validation() {
        assert!(ChoiceProbRequest::new("", vec!["Yes".into(), "No".into()]).is_err());
        assert!(ChoiceProbRequest::new("x", vec!["Yes".into()]).is_err());
        assert!(ChoiceProbRequest::new("x", vec!["Yes".into(), "Yes".into()]).is_err());
        assert!(
            ChoiceProbResponse { probs: vec![0.0, 0.0] }.validate(2).is_err(),
            "all-zero probabilities must be rejected"
        );
        assert!(ChoiceProbResponse { probs: vec![0.1, -0.2] }.validate(2).is_err());
    }

    #[test]
    fn replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");

        let recording = RecordingBackend::new(MockBackend::new(7));
        let req = ChoiceProbRequest::yes_no("Q1");
        let original = recording.choice_prob(&req).unwrap();
        let original_embed = recording.embed(&["hello world".to_string()]).unwrap();
        recording.write_fixture(&path).unwrap();

        let replay = ReplayBackend::load(&path, true).unwrap();
        assert_eq!(replay.choice_prob(&req).unwrap(), original);
        assert_eq!(replay.embed(&["hello world".to_string()]).unwrap(), original_embed);
    }

    #[test]
    fn replay_strict_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        std::fs::write(&path, "").unwrap();
        let replay = ReplayBackend::load(&path, true).unwrap();
        let err = replay.choice_prob(&ChoiceProbRequest::yes_no("unknown")).unwrap_err();
        assert!(matches!(err, Error::FixtureMiss(_)));

        let lenient = ReplayBackend::load(&path, false).unwrap();
        assert!(lenient.choice_prob(&ChoiceProbRequest::yes_no("unknown")).is_ok());
    }

    #[test]
    fn recording_counts_choice_prob_requests() {
        let recording = RecordingBackend::new(MockBackend::new(1));
        recording.choice_prob(&ChoiceProbRequest::yes_no("a")).unwrap();
        recording.choice_prob(&ChoiceProbRequest::yes_no("b")).unwrap();
        recording.embed(&["c".to_string()]).unwrap();
        assert_eq!(recording.choice_prob_count(), 2);
        assert_eq!(recording.records().len(), 3);
    }
}
