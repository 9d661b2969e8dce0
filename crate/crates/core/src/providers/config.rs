use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_API_KEY_ENV: &str = "CCI_API_KEY";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
}

/// Sampling parameters sent with every chat call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding { temperature: 1.0, top_p: 0.99, frequency_penalty: 1.0, presence_penalty: 0.0 }
    }
}

/// Connection settings for one capability endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    /// Request path appended to `endpoint_url`.
    pub path: String,
    /// Environment variable holding the bearer token. Empty means no auth header.
    pub api_key_env: String,
    pub model_id: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub retry_base_delay_ms: u64,
    pub decoding: Decoding,
    /// Image size passed to the image endpoint; `None` leaves it to the provider.
    pub image_size: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint_url: "https://api.openai.com".into(),
            path: "/v1/chat/completions".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            model_id: "gpt-4o-2024-05-13".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            retry_base_delay_ms: 500,
            decoding: Decoding::default(),
            image_size: None,
        }
    }
}

impl ProviderConfig {
    pub fn chat_default() -> Self {
        ProviderConfig::default()
    }

    pub fn image_default() -> Self {
        ProviderConfig { path: "/v1/images/generations".into(), model_id: "dall-e-3".into(), ..Default::default() }
    }

    pub fn embed_default() -> Self {
        ProviderConfig { path: "/v1/embeddings".into(), model_id: "text-embedding-3-small".into(), ..Default::default() }
    }

    pub fn url(&self) -> String {
        format!("{}/{}", self.endpoint_url.trim_end_matches('/'), self.path.trim_start_matches('/'))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.endpoint_url.starts_with("http://") || self.endpoint_url.starts_with("https://")) {
            return Err(invalid("endpoint_url", format!("`{}` is not an http(s) URL", self.endpoint_url)));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(invalid("timeout_secs", "must be > 0"));
        }
        if self.model_id.trim().is_empty() {
            return Err(invalid("model_id", "must not be empty"));
        }
        let d = &self.decoding;
        if !(0.0..=2.0).contains(&d.temperature) {
            return Err(invalid("decoding.temperature", "must be in [0, 2]"));
        }
        if !(d.top_p > 0.0 && d.top_p <= 1.0) {
            return Err(invalid("decoding.top_p", "must be in (0, 1]"));
        }
        if !(-2.0..=2.0).contains(&d.frequency_penalty) || !(-2.0..=2.0).contains(&d.presence_penalty) {
            return Err(invalid("decoding", "penalties must be in [-2, 2]"));
        }
        Ok(())
    }

    /// Resolves the bearer token, `None` when auth is disabled.
    pub fn api_key(&self) -> Result<Option<String>, super::ProviderError> {
        if self.api_key_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&self.api_key_env) {
            Ok(k) if !k.is_empty() => Ok(Some(k)),
            _ => Err(super::ProviderError::MissingApiKey(self.api_key_env.clone())),
        }
    }
}
