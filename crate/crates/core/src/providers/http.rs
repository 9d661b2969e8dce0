//! Blocking client for OpenAI-compatible REST endpoints.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{
    check_texts, ChatProvider, ChatRequest, ChatResponse, Embedder, EmbeddingVector, ImageGenerator, ImageRef,
    ImageSource, ProviderConfig, ProviderError, Usage, VisionProvider,
};
use crate::prompts::Prompt;

/// Exponential backoff: attempt `n` (1-based) waits `base * 2^(n-1)`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

enum Failure {
    Retry(ProviderError),
    Fatal(ProviderError),
}

pub struct OpenAiClient {
    config: ProviderConfig,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl OpenAiClient {
    pub fn new(config: ProviderConfig) -> Result<Self, super::ConfigError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let retry = RetryPolicy {
            max_retries: config.max_retries,
            base_delay: Duration::from_millis(config.retry_base_delay_ms),
            max_delay: Duration::from_secs(30),
        };
        Ok(OpenAiClient { config, agent, retry })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn post(&self, body: &Value) -> Result<Value, ProviderError> {
        let url = self.config.url();
        let key = self.config.api_key()?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.post_once(&url, key.as_deref(), body, attempts) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(e)) => {
                    if attempts > self.retry.max_retries {
                        return Err(e);
                    }
                    let wait = self.retry.delay(attempts);
                    log::debug!("{url}: attempt {attempts} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        }
    }

    fn post_once(&self, url: &str, key: Option<&str>, body: &Value, attempts: u32) -> Result<Value, Failure> {
        let mut req = self.agent.post(url);
        if let Some(k) = key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::BadUri(u)) => {
                return Err(Failure::Fatal(ProviderError::InvalidInput(format!("bad URI {u}"))))
            }
            Err(e) => return Err(Failure::Retry(ProviderError::Transport { attempts, message: e.to_string() })),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Retry(ProviderError::Transport { attempts, message: e.to_string() }))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Failure::Fatal(ProviderError::MalformedResponse(format!("invalid JSON: {e}")))),
            401 | 403 => Err(Failure::Fatal(ProviderError::Auth { status })),
            429 => Err(Failure::Retry(ProviderError::RateLimited { attempts })),
            500..=599 => {
                Err(Failure::Retry(ProviderError::Transport { attempts, message: format!("HTTP {status}: {text}") }))
            }
            400 if text.contains("content_policy") || text.contains("safety system") => {
                Err(Failure::Fatal(ProviderError::ContentPolicyRejection(text)))
            }
            _ => Err(Failure::Fatal(ProviderError::Http { status, body: text })),
        }
    }

    fn decoding_json(&self, request: &ChatRequest) -> Value {
        let d = request.decoding.unwrap_or(self.config.decoding);
        json!({
            "temperature": d.temperature,
            "top_p": d.top_p,
            "frequency_penalty": d.frequency_penalty,
            "presence_penalty": d.presence_penalty,
        })
    }

    fn complete(&self, messages: Value, decoding: Value) -> Result<ChatResponse, ProviderError> {
        let mut body = json!({ "model": self.config.model_id, "messages": messages });
        if let (Value::Object(b), Value::Object(d)) = (&mut body, decoding) {
            b.extend(d);
        }
        let v = self.post(&body)?;
        let choice = v
            .pointer("/choices/0")
            .ok_or_else(|| ProviderError::MalformedResponse("no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::MalformedResponse("choice has no text content".into()))?
            .to_string();
        let finish_reason = choice.get("finish_reason").and_then(Value::as_str).map(str::to_string);
        let usage = Usage {
            prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        };
        Ok(ChatResponse { text, finish_reason, usage })
    }
}

impl ChatProvider for OpenAiClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        if request.messages.is_empty() {
            return Err(ProviderError::InvalidInput("empty message list".into()));
        }
        let messages = serde_json::to_value(&request.messages).expect("messages serialize");
        self.complete(messages, self.decoding_json(request))
    }

    fn model_id(&self) -> &str {
        &self.config.model_id
    }
}

fn mime_for(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    }
}

impl VisionProvider for OpenAiClient {
    fn describe_image(&self, image: &ImageRef, instruction: &Prompt) -> Result<String, ProviderError> {
        if instruction.text.trim().is_empty() {
            return Err(ProviderError::InvalidInput("empty instruction".into()));
        }
        let url = match &image.source {
            ImageSource::RemoteUrl(u) => u.clone(),
            ImageSource::LocalPath(p) => {
                let bytes = image.local_bytes()?.expect("local path has bytes");
                format!("data:{};base64,{}", mime_for(p), base64::engine::general_purpose::STANDARD.encode(bytes))
            }
            ImageSource::MockId(id) => {
                return Err(ProviderError::InvalidInput(format!("mock image `{id}` cannot be sent to a remote model")))
            }
        };
        let messages = json!([{
            "role": "user",
            "content": [
                { "type": "text", "text": instruction.text },
                { "type": "image_url", "image_url": { "url": url } },
            ],
        }]);
        let req = ChatRequest::from_prompt(instruction);
        Ok(self.complete(messages, self.decoding_json(&req))?.text)
    }
}

impl ImageGenerator for OpenAiClient {
    fn generate_image(&self, prompt: &Prompt) -> Result<ImageRef, ProviderError> {
        if prompt.text.trim().is_empty() {
            return Err(ProviderError::InvalidInput("empty image prompt".into()));
        }
        let mut body = json!({ "model": self.config.model_id, "prompt": prompt.text, "n": 1 });
        if let Some(size) = &self.config.image_size {
            body["size"] = json!(size);
        }
        let v = self.post(&body)?;
        let item = v
            .pointer("/data/0")
            .ok_or_else(|| ProviderError::MalformedResponse("no image data".into()))?;
        if let Some(url) = item.get("url").and_then(Value::as_str) {
            return Ok(ImageRef::remote(url));
        }
        if let Some(b64) = item.get("b64_json").and_then(Value::as_str) {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| ProviderError::MalformedResponse(format!("bad base64 image: {e}")))?;
            return Ok(ImageRef {
                content_hash: crate::hashing::sha256_hex(&bytes),
                source: ImageSource::RemoteUrl(format!("data:image/png;base64,{b64}")),
            });
        }
        Err(ProviderError::MalformedResponse("image has neither url nor b64_json".into()))
    }
}

impl Embedder for OpenAiClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        check_texts(texts)?;
        let v = self.post(&json!({ "model": self.config.model_id, "input": texts }))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::MalformedResponse("no data array".into()))?;
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
            let values: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ProviderError::MalformedResponse("item without embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| ProviderError::MalformedResponse("non-numeric embedding".into())))
                .collect::<Result<_, _>>()?;
            let slot = out
                .get_mut(idx)
                .ok_or_else(|| ProviderError::MalformedResponse(format!("embedding index {idx} out of range")))?;
            *slot = Some(EmbeddingVector { values, model_id: self.config.model_id.clone() });
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| ProviderError::MalformedResponse(format!("missing embedding {i}"))))
            .collect()
    }

    fn model_id(&self) -> &str {
        &self.config.model_id
    }
}
