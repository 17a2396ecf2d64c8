//! Blocking HTTP client for the backend wire contract.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use speechgrain_core::backend::{Backend, BackendError};
use speechgrain_core::crossval::{ExpertMap, FilterKind};

/// POSTs the request JSON to `{base_url}{endpoint}`. Connection failures,
/// timeouts, 429 and 5xx are transient; other non-2xx statuses and
/// non-JSON bodies are rejections.
pub struct HttpBackend {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> Result<Self, BackendError> {
        Self::with_timeout(base_url, Duration::from_secs(300))
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Rejected(format!("http client: {e}")))?;
        Ok(Self { base_url: base_url.into().trim_end_matches('/').to_string(), client })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl Backend for HttpBackend {
    fn call(&self, endpoint: &str, request: &Value) -> Result<Value, BackendError> {
        let url = format!("{}{}", self.base_url, endpoint);
        let resp = self
            .client
            .post(&url)
            .json(request)
            .send()
            .map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| BackendError::Unavailable(format!("{url}: reading body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Unavailable(format!("{url}: HTTP {status}: {body}")));
        }
        if !status.is_success() {
            return Err(BackendError::Rejected(format!("{url}: HTTP {status}: {body}")));
        }
        serde_json::from_str(&body).map_err(|e| BackendError::Rejected(format!("{url}: response is not JSON: {e}")))
    }
}

/// Filter → backend URL configuration, e.g.
/// `{"default": "http://asr:8000", "emotion": "http://emo:8001"}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
pub struct BackendMap(pub BTreeMap<String, String>);

impl BackendMap {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let map: BackendMap = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for key in map.0.keys().filter(|k| k.as_str() != "default") {
            key.parse::<FilterKind>().map_err(|e| format!("backend map key `{key}`: {e}"))?;
        }
        if !map.0.contains_key("default") {
            return Err("backend map needs a `default` entry".into());
        }
        Ok(map)
    }

    pub fn experts(&self) -> Result<ExpertMap, BackendError> {
        let default: Arc<dyn Backend> = Arc::new(HttpBackend::new(&self.0["default"])?);
        let mut experts = ExpertMap::single(default);
        for (key, url) in self.0.iter().filter(|(k, _)| k.as_str() != "default") {
            let kind: FilterKind = key.parse().map_err(|e: String| BackendError::Rejected(e))?;
            experts = experts.with(kind, Arc::new(HttpBackend::new(url)?));
        }
        Ok(experts)
    }
}
