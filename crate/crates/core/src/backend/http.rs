use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResult, TokenSource};

pub const API_BASE_ENV: &str = "CAPSULE_API_BASE";
pub const API_KEY_ENV: &str = "CAPSULE_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 4, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(16) }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): base * 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub api_base: String,
    pub api_key: Option<String>,
    pub max_concurrent: usize,
    pub request_timeout: Duration,
    pub retry: RetryPolicy,
}

/// Counting semaphore capping in-flight requests across workers.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter poisoned") += 1;
        self.0.cv.notify_one();
    }
}

enum Failure {
    Transient(String),
    Fatal(String),
}

/// Chat-completion client for OpenAI-compatible endpoints.
#[derive(Debug)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.request_timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", settings.api_base.trim_end_matches('/')),
            api_key: settings.api_key.filter(|k| !k.is_empty()),
            retry: settings.retry,
            limiter: Limiter::new(settings.max_concurrent),
        })
    }

    pub fn body(request: &CompletionRequest) -> Value {
        json!({
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }

    fn attempt(&self, body: &Value) -> Result<Value, Failure> {
        let _permit = self.limiter.acquire();
        let mut req = self.client.post(&self.url).json(body);
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient(format!("HTTP {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(format!("HTTP {status}: {}", snippet(&text))));
        }
        serde_json::from_str(&text).map_err(|e| Failure::Fatal(format!("malformed response body: {e}")))
    }
}

fn snippet(text: &str) -> &str {
    match text.char_indices().nth(300) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// Extracts the completion and usage from a chat-completion response.
pub(crate) fn parse_body(request: &CompletionRequest, body: &Value) -> Result<CompletionResult, BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::BackendUnavailable("response has no choices[0].message.content".into()))?
        .to_string();
    let usage = (body.pointer("/usage/prompt_tokens").and_then(Value::as_u64), body.pointer("/usage/completion_tokens").and_then(Value::as_u64));
    Ok(match usage {
        (Some(p), Some(c)) => CompletionResult { text, prompt_tokens: p, completion_tokens: c, token_source: TokenSource::BackendReported },
        _ => CompletionResult::heuristic(request, text),
    })
}

impl CompletionBackend for HttpBackend {
    fn name(&self) -> &'static str {
        "http"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let body = Self::body(request);
        let mut retry = 0;
        loop {
            match self.attempt(&body) {
                Ok(v) => return parse_body(request, &v),
                Err(Failure::Fatal(m)) => return Err(BackendError::BackendUnavailable(m)),
                Err(Failure::Transient(m)) if retry >= self.retry.max_retries => {
                    return Err(BackendError::BackendUnavailable(format!("giving up after {} attempts: {m}", retry + 1)))
                }
                Err(Failure::Transient(m)) => {
                    let d = self.retry.delay(retry);
                    log::warn!("completion request failed ({m}); retrying in {d:?}");
                    std::thread::sleep(d);
                    retry += 1;
                }
            }
        }
    }
}
