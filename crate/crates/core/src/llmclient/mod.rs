//! Uniform client for text generators and video-conditioned models.
//!
//! A [`Client`] wraps one [`Backend`] with a content-addressed response
//! cache, exponential-backoff retries and a cap on in-flight requests.

mod cache;
mod http;
pub mod mock;

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use cache::DiskCache;
pub use http::HttpBackend;
pub use mock::MockBackend;

use crate::digest::sha256_hex;

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub attachments: Vec<String>,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_key: String,
}

#[derive(Serialize)]
struct KeyFields<'a> {
    prompt: &'a str,
    attachments: &'a [String],
    model_id: &'a str,
    temperature: f64,
    max_tokens: u32,
}

impl GenRequest {
    pub fn new(
        prompt: impl Into<String>,
        attachments: Vec<String>,
        model_id: impl Into<String>,
        temperature: f64,
        max_tokens: u32,
    ) -> Self {
        let mut req = Self {
            prompt: prompt.into(),
            attachments,
            model_id: model_id.into(),
            temperature,
            max_tokens,
            request_key: String::new(),
        };
        req.request_key = req.compute_key();
        req
    }

    /// Text-only request with default sampling settings.
    pub fn text(prompt: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self::new(prompt, Vec::new(), model_id, DEFAULT_TEMPERATURE, DEFAULT_MAX_TOKENS)
    }

    pub fn compute_key(&self) -> String {
        let fields = KeyFields {
            prompt: &self.prompt,
            attachments: &self.attachments,
            model_id: &self.model_id,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        sha256_hex(&serde_json::to_vec(&fields).expect("serializable key fields"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
    pub usage: Usage,
    pub model_id: String,
    pub cached: bool,
    pub latency_ms: u64,
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Retryable: connection errors, timeouts, 429 and 5xx.
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid request: {0}")]
    Invalid(String),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &GenRequest) -> Result<GenResponse, BackendError>;
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("request rejected with HTTP {status}: {body}")]
    RequestRejected { status: u16, body: String },
    #[error("credential environment variable `{0}` is not set")]
    CredentialMissing(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(20),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1), capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.released.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.released.notify_one();
    }
}

pub struct Client {
    backend: Arc<dyn Backend>,
    cache: Option<DiskCache>,
    retry: RetryPolicy,
    limiter: Limiter,
    concurrency: usize,
}

impl Client {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(4),
            concurrency: 4,
        }
    }

    pub fn mock() -> Self {
        Self::new(Arc::new(MockBackend))
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self.limiter = Limiter::new(self.concurrency);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn generate(&self, request: &GenRequest) -> Result<GenResponse, LlmError> {
        if request.request_key != request.compute_key() {
            return Err(LlmError::InvalidRequest(
                "request_key does not match request fields".into(),
            ));
        }
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(&request.request_key)? {
                hit.cached = true;
                hit.latency_ms = 0;
                return Ok(hit);
            }
        }
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut attempt = 0;
        let response = loop {
            attempt += 1;
            match self.backend.complete(request) {
                Ok(r) => break r,
                Err(BackendError::Transient(msg)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(LlmError::BackendUnavailable {
                            attempts: attempt,
                            last: msg,
                        });
                    }
                    log::debug!("{}: attempt {attempt} failed: {msg}", self.backend.name());
                    std::thread::sleep(self.retry.delay(attempt));
                }
                Err(BackendError::Rejected { status, body }) => return Err(LlmError::RequestRejected { status, body }),
                Err(BackendError::Invalid(msg)) => return Err(LlmError::InvalidRequest(msg)),
            }
        };
        let response = GenResponse {
            cached: false,
            latency_ms: started.elapsed().as_millis() as u64,
            ..response
        };
        if let Some(cache) = &self.cache {
            cache.put(&request.request_key, &response)?;
        }
        Ok(response)
    }

    /// Runs requests on up to `concurrency` worker threads. Results are in
    /// input order regardless of completion order.
    pub fn generate_many(&self, requests: &[GenRequest]) -> Vec<Result<GenResponse, LlmError>> {
        let next = Mutex::new(0usize);
        let slots: Vec<Mutex<Option<Result<GenResponse, LlmError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..self.concurrency.min(requests.len()) {
                scope.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().expect("work index");
                        let i = *n;
                        *n += 1;
                        i
                    };
                    if i >= requests.len() {
                        break;
                    }
                    let r = self.generate(&requests[i]);
                    *slots[i].lock().expect("result slot") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("result slot").expect("every request ran"))
            .collect()
    }
}
