//! HTTP adapters.
//!
//! Chat/vision and embeddings speak the OpenAI-compatible JSON contract
//! (`/v1/chat/completions`, `/v1/embeddings`). Image generation and editing
//! use a plain JSON POST to `{endpoint}/generate` and `{endpoint}/edit` with
//! body `{prompt, negative_prompt, seed, guidance_scale, width, height, image?}`
//! and response `{image_b64, width, height}`.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    ChatBackend, ChatRequest, ContentPart, EmbedBackend, GenerationParams, ImageArtifact,
    ImageEditor, ImageGenerator,
};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_RETRIES: u32 = 3;

/// Exponential backoff for transient failures (connection errors, timeouts,
/// HTTP 429 and 5xx).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: DEFAULT_MAX_RETRIES,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay
            .checked_mul(factor)
            .unwrap_or(self.max_delay)
            .min(self.max_delay)
    }
}

/// Shared JSON-over-HTTP client with retry handling.
#[derive(Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
}

enum Failure {
    Transient(String),
    Status(u16, String),
}

impl HttpClient {
    pub fn new(api_key: Option<String>, retry: RetryPolicy, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            agent,
            api_key: api_key.filter(|k| !k.is_empty()),
            retry,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    fn post_once(&self, url: &str, body: &Value) -> std::result::Result<Value, Failure> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| Failure::Status(200, format!("malformed JSON body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                if code == 429 || code >= 500 {
                    Err(Failure::Transient(format!("HTTP {code}: {}", truncate(&text))))
                } else {
                    Err(Failure::Status(code, truncate(&text)))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(Failure::Transient(t.to_string())),
        }
    }

    /// POSTs `body` and returns the parsed JSON response. Transient failures
    /// are retried up to `max_retries` times; other non-2xx statuses map via
    /// `on_status`.
    fn post_json_with(
        &self,
        url: &str,
        body: &Value,
        on_status: impl Fn(u16, String) -> Error,
    ) -> Result<Value> {
        let mut retry = 0;
        loop {
            match self.post_once(url, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Status(200, msg)) => return Err(Error::Protocol(msg)),
                Err(Failure::Status(code, msg)) => return Err(on_status(code, msg)),
                Err(Failure::Transient(msg)) => {
                    if retry >= self.retry.max_retries {
                        return Err(Error::Transport(format!(
                            "{url}: {msg} (gave up after {retry} retries)"
                        )));
                    }
                    thread::sleep(self.retry.delay(retry));
                    retry += 1;
                }
            }
        }
    }

    pub fn post_json(&self, url: &str, body: &Value) -> Result<Value> {
        self.post_json_with(url, body, |code, msg| {
            Error::Protocol(format!("HTTP {code}: {msg}"))
        })
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 512;
    if s.len() <= MAX {
        s.to_string()
    } else {
        let mut end = MAX;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &s[..end])
    }
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

/// Chat/vision over `POST {endpoint}/v1/chat/completions`.
pub struct OpenAiChat {
    client: HttpClient,
    url: String,
    model: String,
}

impl OpenAiChat {
    pub fn new(client: HttpClient, endpoint: &str, model: impl Into<String>) -> Self {
        Self {
            client,
            url: join_url(endpoint, "v1/chat/completions"),
            model: model.into(),
        }
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| {
                let only_text = m.parts.iter().all(|p| matches!(p, ContentPart::Text(_)));
                let content = if only_text {
                    Value::String(m.text_content())
                } else {
                    Value::Array(
                        m.parts
                            .iter()
                            .map(|p| match p {
                                ContentPart::Text(t) => json!({"type": "text", "text": t}),
                                ContentPart::Image { data, media_type } => json!({
                                    "type": "image_url",
                                    "image_url": {
                                        "url": format!("data:{media_type};base64,{}", B64.encode(data))
                                    }
                                }),
                            })
                            .collect(),
                    )
                };
                json!({"role": m.role.as_str(), "content": content})
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for OpenAiChat {
    fn chat_complete(&self, req: &ChatRequest) -> Result<String> {
        let body = self.request_body(req);
        let raw = self.client.post_json(&self.url, &body)?;
        let resp: ChatResponse = serde_json::from_value(raw)
            .map_err(|e| Error::Protocol(format!("unexpected chat response shape: {e}")))?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(Error::EmptyCompletion);
        }
        Ok(text)
    }
}

/// Embeddings over `POST {endpoint}/v1/embeddings`.
pub struct OpenAiEmbed {
    client: HttpClient,
    url: String,
    model: String,
}

impl OpenAiEmbed {
    pub fn new(client: HttpClient, endpoint: &str, model: impl Into<String>) -> Self {
        Self {
            client,
            url: join_url(endpoint, "v1/embeddings"),
            model: model.into(),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl EmbedBackend for OpenAiEmbed {
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let body = json!({"model": self.model, "input": text});
        let raw = self.client.post_json(&self.url, &body)?;
        let resp: EmbeddingResponse = serde_json::from_value(raw)
            .map_err(|e| Error::Protocol(format!("unexpected embedding response shape: {e}")))?;
        resp.data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| Error::Protocol("embedding response has no data".into()))
    }
}

/// Image generation/editing server speaking the simple JSON contract.
pub struct HttpImageModel {
    client: HttpClient,
    url: String,
}

#[derive(Deserialize)]
struct ImageResponse {
    image_b64: String,
    width: u32,
    height: u32,
}

impl HttpImageModel {
    /// Generation client posting to `{endpoint}/generate`.
    pub fn generator(client: HttpClient, endpoint: &str) -> Self {
        Self {
            client,
            url: join_url(endpoint, "generate"),
        }
    }

    /// Editing client posting to `{endpoint}/edit`.
    pub fn editor(client: HttpClient, endpoint: &str) -> Self {
        Self {
            client,
            url: join_url(endpoint, "edit"),
        }
    }

    pub fn request_body(
        pos: &str,
        neg: &str,
        seed: u64,
        cfg: &GenerationParams,
        image: Option<&[u8]>,
    ) -> Value {
        let mut body = json!({
            "prompt": pos,
            "negative_prompt": neg,
            "seed": seed,
            "guidance_scale": cfg.guidance_scale,
            "width": cfg.width,
            "height": cfg.height,
        });
        if let Some(img) = image {
            body["image"] = json!(B64.encode(img));
        }
        body
    }

    fn call(&self, body: Value) -> Result<(Vec<u8>, u32, u32)> {
        let raw = self.client.post_json_with(&self.url, &body, |code, msg| {
            if matches!(code, 400 | 403 | 422) {
                Error::GenerationRejected(format!("HTTP {code}: {msg}"))
            } else {
                Error::Protocol(format!("HTTP {code}: {msg}"))
            }
        })?;
        let resp: ImageResponse = serde_json::from_value(raw)
            .map_err(|e| Error::Protocol(format!("unexpected image response shape: {e}")))?;
        let bytes = B64
            .decode(resp.image_b64.trim())
            .map_err(|e| Error::Decode(format!("image_b64 is not valid base64: {e}")))?;
        Ok((bytes, resp.width, resp.height))
    }
}

impl ImageGenerator for HttpImageModel {
    fn generate(
        &self,
        pos: &str,
        neg: &str,
        seed: u64,
        cfg: &GenerationParams,
    ) -> Result<ImageArtifact> {
        let (bytes, width, height) = self.call(Self::request_body(pos, neg, seed, cfg, None))?;
        Ok(ImageArtifact {
            bytes,
            width,
            height,
            seed,
            positive_prompt: pos.into(),
            negative_prompt: neg.into(),
            guidance_scale: cfg.guidance_scale,
            parent: None,
        })
    }
}

impl ImageEditor for HttpImageModel {
    fn edit(
        &self,
        base: &Arc<ImageArtifact>,
        pos: &str,
        neg: &str,
        seed: u64,
        cfg: &GenerationParams,
    ) -> Result<ImageArtifact> {
        let cfg = GenerationParams {
            width: base.width,
            height: base.height,
            ..*cfg
        };
        let body = Self::request_body(pos, neg, seed, &cfg, Some(&base.bytes));
        let (bytes, width, height) = self.call(body)?;
        Ok(ImageArtifact {
            bytes,
            width,
            height,
            seed,
            positive_prompt: pos.into(),
            negative_prompt: neg.into(),
            guidance_scale: cfg.guidance_scale,
            parent: Some(Arc::clone(base)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ChatMessage;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(350));
        assert_eq!(p.delay(40), Duration::from_millis(350));
    }

    #[test]
    fn chat_body_embeds_images_as_data_urls() {
        let client = HttpClient::new(None, RetryPolicy::default(), Duration::from_secs(1));
        let chat = OpenAiChat::new(client, "http://x/", "m");
        let mut user = ChatMessage::user("look");
        user.push_png(&[1, 2, 3]);
        let mut req = ChatRequest::new(vec![ChatMessage::system("sys"), user]);
        req.seed = Some(9);
        let body = chat.request_body(&req);
        assert_eq!(chat.url, "http://x/v1/chat/completions");
        assert_eq!(body["messages"][0]["content"], "sys");
        assert_eq!(body["messages"][1]["content"][1]["type"], "image_url");
        assert_eq!(
            body["messages"][1]["content"][1]["image_url"]["url"],
            "data:image/png;base64,AQID"
        );
        assert_eq!(body["seed"], 9);
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn image_body_fields() {
        let cfg = GenerationParams::default();
        let body = HttpImageModel::request_body("p", "n", 3, &cfg, Some(&[0xff]));
        let mut keys: Vec<_> = body.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["guidance_scale", "height", "image", "negative_prompt", "prompt", "seed", "width"]
        );
        assert_eq!(body["image"], "/w==");
    }
}
