//! Interfaces for every external model capability, one trait per
//! capability, with an OpenAI-compatible HTTP client and deterministic
//! offline mocks behind them.

mod config;
mod http;
pub mod mock;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{Prompt, Vars};

pub use config::{ConfigError, Decoding, ProviderConfig, DEFAULT_API_KEY_ENV};
pub use http::{OpenAiClient, RetryPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("authentication failed (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited; gave up after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("content policy rejection: {0}")]
    ContentPolicyRejection(String),
    #[error("image unreadable at {path:?}: {reason}")]
    ImageUnreadable { path: PathBuf, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("API key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("embedding mismatch: {0}")]
    EmbeddingMismatch(String),
}

impl ProviderError {
    /// Number of HTTP attempts made before the error surfaced, when known.
    pub fn attempts(&self) -> Option<u32> {
        match self {
            ProviderError::RateLimited { attempts } | ProviderError::Transport { attempts, .. } => Some(*attempts),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
}

/// A chat completion request. `template_id`, `vars` and `sample` are local
/// metadata: the HTTP client sends only the messages and decoding settings,
/// while the mock uses them to pick a reply generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub template_id: Option<String>,
    pub vars: Vars,
    pub sample: u32,
    pub decoding: Option<Decoding>,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        ChatRequest { messages, template_id: None, vars: Vars::new(), sample: 0, decoding: None }
    }

    pub fn from_prompt(prompt: &Prompt) -> Self {
        ChatRequest {
            messages: vec![Message::user(prompt.text.clone())],
            template_id: Some(prompt.template_id.clone()),
            vars: prompt.vars.clone(),
            sample: 0,
            decoding: None,
        }
    }

    pub fn with_sample(mut self, sample: u32) -> Self {
        self.sample = sample;
        self
    }

    /// Full text of all messages, used for hashing and usage estimates.
    pub fn joined_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::Add for Usage {
    type Output = Usage;
    fn add(self, rhs: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: Option<String>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    RemoteUrl(String),
    LocalPath(PathBuf),
    MockId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub source: ImageSource,
    /// Hex SHA-256 of the image bytes; empty when the bytes were never seen.
    pub content_hash: String,
}

impl ImageRef {
    pub fn mock(id: impl Into<String>) -> Self {
        ImageRef { source: ImageSource::MockId(id.into()), content_hash: String::new() }
    }

    pub fn remote(url: impl Into<String>) -> Self {
        ImageRef { source: ImageSource::RemoteUrl(url.into()), content_hash: String::new() }
    }

    /// A local image, hashed on construction. Fails if the file cannot be read.
    pub fn local(path: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let path = path.into();
        let bytes = read_image(&path)?;
        Ok(ImageRef { content_hash: crate::hashing::sha256_hex(&bytes), source: ImageSource::LocalPath(path) })
    }

    /// Reads the bytes of a local image; remote and mock images have none.
    pub fn local_bytes(&self) -> Result<Option<Vec<u8>>, ProviderError> {
        match &self.source {
            ImageSource::LocalPath(p) => read_image(p).map(Some),
            _ => Ok(None),
        }
    }
}

fn read_image(path: &std::path::Path) -> Result<Vec<u8>, ProviderError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ProviderError::ImageUnreadable { path: path.to_path_buf(), reason: e.to_string() })?;
    if bytes.is_empty() {
        return Err(ProviderError::ImageUnreadable { path: path.to_path_buf(), reason: "file is empty".into() });
    }
    Ok(bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity. Zero vectors have similarity 0 with everything.
    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64, ProviderError> {
        if self.model_id != other.model_id {
            return Err(ProviderError::EmbeddingMismatch(format!(
                "model `{}` vs `{}`",
                self.model_id, other.model_id
            )));
        }
        if self.values.len() != other.values.len() {
            return Err(ProviderError::EmbeddingMismatch(format!(
                "length {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        Ok((dot / (na * nb)).clamp(-1.0, 1.0))
    }

    /// Mean of several vectors, L2-normalized.
    pub fn mean_pool(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector, ProviderError> {
        let first = vectors.first().ok_or_else(|| ProviderError::InvalidInput("nothing to pool".into()))?;
        let mut acc = vec![0.0; first.values.len()];
        for v in vectors {
            if v.values.len() != acc.len() || v.model_id != first.model_id {
                return Err(ProviderError::EmbeddingMismatch("pooled vectors disagree".into()));
            }
            for (a, x) in acc.iter_mut().zip(&v.values) {
                *a += x;
            }
        }
        let mut pooled = EmbeddingVector { values: acc, model_id: first.model_id.clone() };
        pooled.normalize();
        Ok(pooled)
    }

    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            for v in &mut self.values {
                *v /= n;
            }
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
    fn model_id(&self) -> &str;
}

pub trait ImageGenerator: Send + Sync {
    fn generate_image(&self, prompt: &Prompt) -> Result<ImageRef, ProviderError>;
}

pub trait VisionProvider: Send + Sync {
    fn describe_image(&self, image: &ImageRef, instruction: &Prompt) -> Result<String, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
    fn model_id(&self) -> &str;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerError {
    #[error("continuation scorer unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Scores how naturally `cand` continues `prev`, in `[0, 1]`.
pub trait ContinuationScorer: Send + Sync {
    fn score(&self, prev: &str, cand: &str) -> Result<f64, ScorerError>;
    fn name(&self) -> &str;
}

pub(crate) fn check_texts(texts: &[String]) -> Result<(), ProviderError> {
    if texts.is_empty() {
        return Err(ProviderError::InvalidInput("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(ProviderError::InvalidInput(format!("text {i} is empty")));
    }
    Ok(())
}

/// Generates an image, re-sampling the same prompt up to `resamples` more
/// times when the backend rejects it on content policy grounds.
pub fn generate_image_resampling(
    generator: &dyn ImageGenerator,
    prompt: &Prompt,
    resamples: u32,
) -> Result<ImageRef, ProviderError> {
    let mut last = None;
    for attempt in 0..=resamples {
        match generator.generate_image(prompt) {
            Ok(img) => return Ok(img),
            Err(e @ ProviderError::ContentPolicyRejection(_)) => {
                log::warn!("image prompt `{}` rejected (attempt {}): {e}", prompt.template_id, attempt + 1);
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Chat wrapper that totals token usage across every call that goes through it.
pub struct MeteredChat {
    inner: Arc<dyn ChatProvider>,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    calls: AtomicU64,
}

impl MeteredChat {
    pub fn new(inner: Arc<dyn ChatProvider>) -> Self {
        MeteredChat {
            inner,
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
            calls: AtomicU64::new(0),
        }
    }

    pub fn usage(&self) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens.load(Ordering::SeqCst),
            completion_tokens: self.completion_tokens.load(Ordering::SeqCst),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for MeteredChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let resp = self.inner.chat(request)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompt_tokens.fetch_add(resp.usage.prompt_tokens, Ordering::SeqCst);
        self.completion_tokens.fetch_add(resp.usage.completion_tokens, Ordering::SeqCst);
        Ok(resp)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

/// The bundle of capabilities a pipeline run needs.
#[derive(Clone)]
pub struct Providers {
    pub chat: Arc<dyn ChatProvider>,
    pub image: Arc<dyn ImageGenerator>,
    pub vision: Arc<dyn VisionProvider>,
    pub embed: Arc<dyn Embedder>,
}

impl Providers {
    /// All four capabilities backed by deterministic mocks keyed by `seed`.
    pub fn mock(seed: u64) -> Self {
        Providers {
            chat: Arc::new(mock::MockChat::new(seed)),
            image: Arc::new(mock::MockImage::new(seed)),
            vision: Arc::new(mock::MockVision::new(seed)),
            embed: Arc::new(mock::MockEmbedder::new()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector { values: values.to_vec(), model_id: "m".into() }
    }

    #[test]
    fn cosine_basics() {
        assert!((v(&[1.0, 2.0]).cosine(&v(&[2.0, 4.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(v(&[1.0, 0.0]).cosine(&v(&[0.0, 3.0])).unwrap(), 0.0);
        assert_eq!(v(&[0.0, 0.0]).cosine(&v(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(v(&[1.0]).cosine(&v(&[1.0, 0.0])).is_err());
        let other = EmbeddingVector { values: vec![1.0], model_id: "x".into() };
        assert!(v(&[1.0]).cosine(&other).is_err());
    }

    #[test]
    fn local_image_errors_name_the_path() {
        let err = ImageRef::local("/definitely/not/here.png").unwrap_err();
        assert!(matches!(err, ProviderError::ImageUnreadable { .. }));
    }

    struct Rejecting(std::sync::atomic::AtomicU32);
    impl ImageGenerator for Rejecting {
        fn generate_image(&self, _: &Prompt) -> Result<ImageRef, ProviderError> {
            if self.0.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err(ProviderError::ContentPolicyRejection("no".into()))
            } else {
                Ok(ImageRef::mock("ok"))
            }
        }
    }

    #[test]
    fn content_policy_resamples_at_most_twice() {
        let p = crate::prompts::IG_CHARACTER_MANGA.prompt(Vars::new()).unwrap();
        let g = Rejecting(std::sync::atomic::AtomicU32::new(2));
        assert_eq!(generate_image_resampling(&g, &p, 2).unwrap(), ImageRef::mock("ok"));
        let g = Rejecting(std::sync::atomic::AtomicU32::new(3));
        assert!(matches!(generate_image_resampling(&g, &p, 2), Err(ProviderError::ContentPolicyRejection(_))));
    }
}
