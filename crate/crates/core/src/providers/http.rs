//! Blocking HTTP client for the model-server sidecar.
//!
//! Wire contract:
//!
//! ```text
//! GET  /info        -> {"model", "vocab_size", "dim", "mode", "vocab_sha256"}
//! POST /logits      {"token_ids", "target_position"} -> {"logits"}
//! POST /tokenize    {"text"} -> {"token_ids"}
//! GET  /embeddings  -> binary embedding table
//! ```
//!
//! Failures come back as `{"error": str}` with a non-2xx status. The full
//! prompt is always sent; masking or truncating it for the configured mode is
//! the server's job.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_logit_length, ContextMode, ContextWindow, LogitProvider, ProviderDescriptor, ProviderKind};
use crate::error::{CapeError, Result};
use crate::utility::LogitVector;
use crate::vocab::{EmbeddingTable, TokenId, Vocabulary};

const EMBEDDING_BODY_LIMIT: u64 = 16 << 30;
const JSON_BODY_LIMIT: u64 = 256 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub timeout: Duration,
    /// Upper bound on concurrent requests from this client.
    pub max_in_flight: usize,
    /// Total tries per request, including the first.
    pub attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(60),
            max_in_flight: 8,
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub model: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub mode: ContextMode,
    pub vocab_sha256: String,
}

#[derive(Serialize)]
struct LogitsRequest<'a> {
    token_ids: &'a [TokenId],
    target_position: usize,
}

#[derive(Deserialize)]
struct LogitsResponse {
    logits: Vec<f64>,
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    token_ids: Vec<u32>,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

struct Permits {
    free: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("permit lock poisoned");
        while *free == 0 {
            free = self.freed.wait(free).expect("permit lock poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock poisoned") += 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Done(Vec<u8>),
    Retry(String),
    Fail(String),
}

pub struct HttpProvider {
    config: HttpConfig,
    agent: ureq::Agent,
    permits: Permits,
    descriptor: ProviderDescriptor,
    info: ServerInfo,
    vocab: Arc<Vocabulary>,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider").field("base_url", &self.config.base_url).field("info", &self.info).finish()
    }
}

impl HttpProvider {
    /// Fetches `/info` and fails unless the server's vocabulary matches `vocab`.
    pub fn connect(config: HttpConfig, vocab: Arc<Vocabulary>) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let permits = Permits::new(config.max_in_flight);
        let mut provider = Self {
            config,
            agent,
            permits,
            descriptor: ProviderDescriptor {
                kind: ProviderKind::Http,
                vocabulary_hash: String::new(),
                vocab_size: 0,
                model_name: String::new(),
                mode: ContextMode::Bidirectional,
            },
            info: ServerInfo {
                model: String::new(),
                vocab_size: 0,
                dim: 0,
                mode: ContextMode::Bidirectional,
                vocab_sha256: String::new(),
            },
            vocab,
        };
        let info: ServerInfo = provider.get_json("/info")?;
        provider.descriptor = ProviderDescriptor {
            kind: ProviderKind::Http,
            vocabulary_hash: info.vocab_sha256.clone(),
            vocab_size: info.vocab_size,
            model_name: info.model.clone(),
            mode: info.mode,
        };
        provider.info = info;
        provider.descriptor.check_binding(&provider.vocab)?;
        Ok(provider)
    }

    pub fn info(&self) -> &ServerInfo {
        &self.info
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn attempt(&self, path: &str, body: Option<&serde_json::Value>, limit: u64) -> Attempt {
        let url = self.url(path);
        let result = match body {
            Some(b) => self.agent.post(&url).send_json(b),
            None => self.agent.get(&url).call(),
        };
        let mut resp = match result {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("{url}: {e}")),
        };
        let status = resp.status().as_u16();
        let bytes = match resp.body_mut().with_config().limit(limit).read_to_vec() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(format!("{url}: reading body: {e}")),
        };
        if (200..300).contains(&status) {
            return Attempt::Done(bytes);
        }
        let detail = serde_json::from_slice::<ErrorBody>(&bytes)
            .map(|e| e.error)
            .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).chars().take(200).collect());
        let msg = format!("{url}: status {status}: {detail}");
        if status >= 500 || status == 429 {
            Attempt::Retry(msg)
        } else {
            Attempt::Fail(msg)
        }
    }

    fn request(&self, path: &str, body: Option<&serde_json::Value>, limit: u64) -> Result<Vec<u8>> {
        let _permit = self.permits.acquire();
        let attempts = self.config.attempts.max(1);
        let mut delay = self.config.backoff;
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                log::warn!("retrying {path} after: {last}");
                std::thread::sleep(delay);
                delay = delay.saturating_mul(2);
            }
            match self.attempt(path, body, limit) {
                Attempt::Done(bytes) => return Ok(bytes),
                Attempt::Fail(msg) => return Err(CapeError::Provider(msg)),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(CapeError::Provider(format!("gave up after {attempts} attempts: {last}")))
    }

    fn parse<T: serde::de::DeserializeOwned>(&self, path: &str, bytes: &[u8]) -> Result<T> {
        serde_json::from_slice(bytes)
            .map_err(|e| CapeError::Provider(format!("{}: malformed response: {e}", self.url(path))))
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T> {
        let bytes = self.request(path, None, JSON_BODY_LIMIT)?;
        self.parse(path, &bytes)
    }

    fn post_json<B: Serialize, T: serde::de::DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let body = serde_json::to_value(body)?;
        let bytes = self.request(path, Some(&body), JSON_BODY_LIMIT)?;
        self.parse(path, &bytes)
    }
}

impl LogitProvider for HttpProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let resp: TokenizeResponse = self.post_json("/tokenize", &TokenizeRequest { text })?;
        resp.token_ids
            .into_iter()
            .map(|id| {
                if (id as usize) < self.vocab.len() {
                    Ok(TokenId(id))
                } else {
                    Err(CapeError::Provider(format!(
                        "server returned token id {id} outside vocabulary of size {}",
                        self.vocab.len()
                    )))
                }
            })
            .collect()
    }

    fn context_logits(&self, window: &ContextWindow<'_>) -> Result<LogitVector> {
        if window.mode != self.info.mode {
            return Err(CapeError::Provider(format!(
                "server computes {} logits, {} requested",
                self.info.mode, window.mode
            )));
        }
        let resp: LogitsResponse = self.post_json(
            "/logits",
            &LogitsRequest { token_ids: window.token_ids, target_position: window.target_position },
        )?;
        check_logit_length(resp.logits.len(), self.vocab.len())?;
        LogitVector::new(resp.logits, window.context_id()).map_err(|e| CapeError::Provider(e.to_string()))
    }

    fn embedding_table(&self) -> Result<EmbeddingTable> {
        let bytes = self.request("/embeddings", None, EMBEDDING_BODY_LIMIT)?;
        let url = self.url("/embeddings");
        let table = EmbeddingTable::read_binary(bytes.as_slice(), &self.vocab, std::path::Path::new(&url))?;
        if table.dim() != self.info.dim {
            return Err(CapeError::Provider(format!(
                "server reported dimension {} but sent {}",
                self.info.dim,
                table.dim()
            )));
        }
        Ok(table)
    }
}
