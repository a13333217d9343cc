//! Completion backends: an HTTP chat-completion client, a scripted mock and
//! a transcript replayer, all behind [`CompletionBackend`].

mod http;
mod mock;
mod replay;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

pub use http::{HttpBackend, HttpSettings, RetryPolicy, API_BASE_ENV, API_KEY_ENV};
pub use mock::{MockBackend, MockScript};
pub use replay::{RecordingBackend, ReplayBackend, TranscriptEntry};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Problem the request belongs to. Selects the mock script and is part
    /// of the replay digest, so identical prompts for different problems
    /// never share transcript entries.
    pub problem_id: String,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidRequest(m.to_string()));
        if self.system_text.is_empty() || self.user_text.is_empty() {
            return bad("prompt texts must be non-empty");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        Ok(())
    }

    pub fn prompt_bytes(&self) -> usize {
        self.system_text.len() + self.user_text.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    BackendReported,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub token_source: TokenSource,
}

impl CompletionResult {
    /// Result with token counts estimated from byte lengths.
    pub fn heuristic(request: &CompletionRequest, text: String) -> Self {
        Self {
            prompt_tokens: heuristic_tokens(request.prompt_bytes()),
            completion_tokens: heuristic_tokens(text.len()),
            text,
            token_source: TokenSource::Heuristic,
        }
    }
}

/// `ceil(bytes / 4)`.
pub fn heuristic_tokens(bytes: usize) -> u64 {
    (bytes as u64).div_ceil(4)
}

/// Hex sha256 over the fields that determine a completion.
pub fn request_digest(req: &CompletionRequest) -> String {
    let mut buf = Vec::with_capacity(req.prompt_bytes() + 128);
    for part in [req.model_name.as_str(), req.problem_id.as_str(), &format!("{:?}", req.temperature), &req.system_text, &req.user_text] {
        buf.extend_from_slice(&(part.len() as u64).to_le_bytes());
        buf.extend_from_slice(part.as_bytes());
    }
    sha256_hex(&buf)
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("completion backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("replay transcript has no entry for request {digest} (problem {problem_id})")]
    ReplayExhausted { digest: String, problem_id: String },
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

pub trait CompletionBackend: Send + Sync {
    fn name(&self) -> &'static str;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
    Replay,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Http => "http",
            BackendKind::Mock => "mock",
            BackendKind::Replay => "replay",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" | "openai" => Ok(BackendKind::Http),
            "mock" => Ok(BackendKind::Mock),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!("unknown completion backend '{other}' (expected http, mock or replay)")),
        }
    }
}

/// Everything a backend constructor may need.
#[derive(Debug, Clone, Default)]
pub struct BackendSettings {
    pub mock_script: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    pub api_base: Option<String>,
    pub api_key: Option<String>,
    pub max_concurrent: usize,
    pub request_timeout: Option<Duration>,
    pub retry: RetryPolicy,
}

type BackendConstructor = fn(&BackendSettings) -> Result<Box<dyn CompletionBackend>, BackendError>;

/// Completion backends by name.
pub struct BackendRegistry {
    entries: Vec<(&'static str, BackendConstructor)>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register("http", |s| {
            let base = s
                .api_base
                .clone()
                .or_else(|| std::env::var(API_BASE_ENV).ok())
                .ok_or_else(|| BackendError::Config(format!("{API_BASE_ENV} is not set")))?;
            let key = s.api_key.clone().or_else(|| std::env::var(API_KEY_ENV).ok());
            let settings = HttpSettings {
                api_base: base,
                api_key: key,
                max_concurrent: s.max_concurrent.max(1),
                request_timeout: s.request_timeout.unwrap_or(Duration::from_secs(120)),
                retry: s.retry.clone(),
            };
            Ok(Box::new(HttpBackend::new(settings)?))
        });
        r.register("mock", |s| {
            let path = s.mock_script.as_ref().ok_or_else(|| BackendError::Config("mock backend needs a script file".into()))?;
            Ok(Box::new(MockBackend::load(path)?))
        });
        r.register("replay", |s| {
            let path = s.transcript.as_ref().ok_or_else(|| BackendError::Config("replay backend needs a transcript file".into()))?;
            Ok(Box::new(ReplayBackend::load(path)?))
        });
        r
    }
}

impl BackendRegistry {
    pub fn register(&mut self, name: &'static str, ctor: BackendConstructor) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, ctor));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, name: &str, settings: &BackendSettings) -> Result<Box<dyn CompletionBackend>, BackendError> {
        let name = name.parse::<BackendKind>().map(BackendKind::as_str).unwrap_or(name);
        let (_, ctor) = self.entries.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            BackendError::Config(format!("unknown completion backend '{name}' (known: {})", self.names().join(", ")))
        })?;
        ctor(settings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn request(problem: &str, user: &str) -> CompletionRequest {
        CompletionRequest {
            system_text: "sys".into(),
            user_text: user.into(),
            model_name: "m".into(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            problem_id: problem.into(),
        }
    }

    #[test]
    fn heuristic_of_400_bytes_is_100() {
        assert_eq!(heuristic_tokens(400), 100);
        assert_eq!(heuristic_tokens(401), 101);
        assert_eq!(heuristic_tokens(0), 0);
        let mut req = request("p", "");
        req.system_text = "a".repeat(150);
        req.user_text = "b".repeat(250);
        assert_eq!(CompletionResult::heuristic(&req, "x".repeat(9)).prompt_tokens, 100);
        assert_eq!(CompletionResult::heuristic(&req, "x".repeat(9)).completion_tokens, 3);
    }

    #[test]
    fn digest_separates_fields() {
        let a = request("p", "xy");
        let mut b = a.clone();
        b.problem_id = "q".into();
        let mut c = a.clone();
        c.system_text = "sysx".into();
        c.user_text = "y".into();
        assert_ne!(request_digest(&a), request_digest(&b));
        assert_ne!(request_digest(&a), request_digest(&c));
        assert_eq!(request_digest(&a), request_digest(&a.clone()));
    }

    #[test]
    fn validation() {
        assert!(request("p", "u").validate().is_ok());
        assert!(request("p", "").validate().is_err());
        let mut r = request("p", "u");
        r.temperature = -0.1;
        assert!(r.validate().is_err());
        r.temperature = f64::NAN;
        assert!(r.validate().is_err());
    }

    #[test]
    fn registry_names_and_errors() {
        let r = BackendRegistry::default();
        assert_eq!(r.names(), vec!["http", "mock", "replay"]);
        assert!(matches!(r.build("mock", &BackendSettings::default()), Err(BackendError::Config(_))));
        assert!(matches!(r.build("gpt", &BackendSettings::default()), Err(BackendError::Config(_))));
    }
}
