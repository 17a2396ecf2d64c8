//! Wire contract shared by every model-backed component.
//!
//! A backend is a single request/response exchange of JSON documents at a
//! named endpoint. HTTP transports live outside this crate; tests use
//! in-process implementations.

use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod endpoints {
    pub const ANNOTATE: &str = "/v1/annotate";
    pub const TRANSCRIBE: &str = "/v1/transcribe";
    pub const CLASSIFY: &str = "/v1/classify";
    pub const GENERATE_MCQ: &str = "/v1/generate-mcq";
    pub const CHOOSE: &str = "/v1/choose";
    pub const TRANSCRIBE_TAGGED: &str = "/v1/transcribe-tagged";
    pub const ALIGN: &str = "/v1/align";

    pub const ALL: [&str; 7] = [ANNOTATE, TRANSCRIBE, CLASSIFY, GENERATE_MCQ, CHOOSE, TRANSCRIBE_TAGGED, ALIGN];
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Transient: connection failure, timeout, 5xx. Retried.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    /// Permanent: the backend refused the request. Not retried.
    #[error("backend rejected request: {0}")]
    Rejected(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

pub trait Backend: Send + Sync {
    fn call(&self, endpoint: &str, request: &Value) -> Result<Value, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn call(&self, endpoint: &str, request: &Value) -> Result<Value, BackendError> {
        (**self).call(endpoint, request)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn call(&self, endpoint: &str, request: &Value) -> Result<Value, BackendError> {
        (**self).call(endpoint, request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn call(&self, endpoint: &str, request: &Value) -> Result<Value, BackendError> {
        (**self).call(endpoint, request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(200),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    /// `attempts` tries with no sleeping in between.
    pub fn immediate(attempts: u32) -> Self {
        Self { max_attempts: attempts, initial_backoff: Duration::ZERO, ..Self::default() }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.multiplier.powi(retry.saturating_sub(1) as i32);
        self.initial_backoff.mul_f64(factor).min(self.max_backoff)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendMetadata {
    pub latency_ms: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub response: Value,
    pub metadata: BackendMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{last} (after {attempts} attempt(s))")]
pub struct RetryError {
    pub last: BackendError,
    pub attempts: u32,
}

/// Calls `endpoint`, retrying transient failures with exponential backoff.
/// The request is stamped with a content-derived `request_id`, so every
/// retry carries the same id.
pub fn call_with_retry(
    backend: &dyn Backend,
    endpoint: &str,
    request: &Value,
    policy: &RetryPolicy,
) -> Result<Exchange, RetryError> {
    let mut request = request.clone();
    if let Value::Object(map) = &mut request {
        if !map.contains_key("request_id") {
            let id = request_id(endpoint, &Value::Object(map.clone()));
            map.insert("request_id".into(), Value::String(id));
        }
    }
    let started = Instant::now();
    let mut attempt = 0;
    loop {
        attempt += 1;
        match backend.call(endpoint, &request) {
            Ok(response) => {
                return Ok(Exchange {
                    response,
                    metadata: BackendMetadata { latency_ms: started.elapsed().as_millis() as u64, attempts: attempt },
                })
            }
            Err(e) if e.is_transient() && attempt < policy.max_attempts.max(1) => {
                tracing::debug!(endpoint, attempt, error = %e, "retrying backend call");
                let delay = policy.backoff(attempt);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            Err(last) => return Err(RetryError { last, attempts: attempt }),
        }
    }
}

/// Deterministic JSON text with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(&map[k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            scalar => out.push_str(&scalar.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content address of a request.
pub fn request_id(endpoint: &str, payload: &Value) -> String {
    sha256_hex(format!("{endpoint}\n{}", canonical_json(payload)).as_bytes())
}

/// Reference to (a span of) an audio file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRef {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_s: Option<f64>,
}

impl AudioRef {
    pub fn file(path: impl Into<String>) -> Self {
        Self { path: path.into(), start_s: None, end_s: None }
    }

    pub fn span(path: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self { path: path.into(), start_s: Some(start_s), end_s: Some(end_s) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioMode {
    #[default]
    Reference,
    Base64,
}

/// Audio as it goes on the wire: by reference, or with the file inlined.
pub fn audio_payload(audio: &AudioRef, mode: AudioMode) -> std::io::Result<Value> {
    let mut v = serde_json::to_value(audio).expect("audio ref serializes");
    if mode == AudioMode::Base64 {
        let bytes = std::fs::read(Path::new(&audio.path))?;
        v["data_base64"] = Value::String(base64::engine::general_purpose::STANDARD.encode(bytes));
    }
    Ok(v)
}

type Handler = dyn Fn(&str, &Value) -> Result<Value, BackendError> + Send + Sync;

/// In-process backend driven by a closure; records every call.
pub struct ScriptedBackend {
    handler: Box<Handler>,
    calls: Mutex<Vec<(String, Value)>>,
}

impl ScriptedBackend {
    pub fn new<F>(handler: F) -> Self
    where
        F: Fn(&str, &Value) -> Result<Value, BackendError> + Send + Sync + 'static,
    {
        Self { handler: Box::new(handler), calls: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> Vec<(String, Value)> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    pub fn calls_to(&self, endpoint: &str) -> usize {
        self.calls.lock().unwrap().iter().filter(|(e, _)| e == endpoint).count()
    }
}

impl Backend for ScriptedBackend {
    fn call(&self, endpoint: &str, request: &Value) -> Result<Value, BackendError> {
        self.calls.lock().unwrap().push((endpoint.to_string(), request.clone()));
        (self.handler)(endpoint, request)
    }
}
