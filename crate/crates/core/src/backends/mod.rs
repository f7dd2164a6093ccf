//! Access to the four external model capabilities: chat/vision, text
//! embedding, image generation and image editing.
//!
//! Every capability is a trait so that the HTTP adapters in [`http`] and the
//! deterministic mocks in [`mock`] are interchangeable. The free functions in
//! this module ([`embed_text`], [`generate_image`], [`edit_image`]) enforce the
//! pre- and post-conditions shared by all implementations.

pub mod http;
pub mod mock;
pub(crate) mod schema;
pub mod structured;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use schema::{validate_schema, SchemaId};
pub use structured::{chat_complete_structured, extract_json};

/// Guidance scale passed to both image models.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 4.0;
/// Negative prompt weight for both image models.
pub const DEFAULT_NEGATIVE_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    Image { data: Vec<u8>, media_type: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::text(Role::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::text(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::text(Role::Assistant, text)
    }

    pub fn push_png(&mut self, png: &[u8]) {
        self.parts.push(ContentPart::Image {
            data: png.to_vec(),
            media_type: "image/png".into(),
        });
    }

    /// Concatenation of all text parts.
    pub fn text_content(&self) -> String {
        let mut out = String::new();
        for part in &self.parts {
            if let ContentPart::Text(t) = part {
                out.push_str(t);
            }
        }
        out
    }

    pub fn image_count(&self) -> usize {
        self.parts
            .iter()
            .filter(|p| matches!(p, ContentPart::Image { .. }))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Precondition(format!(
                "{} message has no content parts",
                self.role.as_str()
            )));
        }
        if self.role != Role::User && self.image_count() > 0 {
            return Err(Error::Precondition(format!(
                "image parts are only allowed in user messages, found one in a {} message",
                self.role.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Local routing label naming the template that produced this request.
    /// Never sent over the wire; mocks key their scripts on it.
    pub tag: Option<String>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: 0.0,
            max_tokens: 4096,
            seed: None,
            tag: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Precondition("chat request has no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Precondition(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Precondition("max_tokens must be positive".into()));
        }
        self.messages.iter().try_for_each(ChatMessage::validate)
    }

    /// Text of the first system message, or empty.
    pub fn system_text(&self) -> String {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(ChatMessage::text_content)
            .unwrap_or_default()
    }

    /// Text of the last user message, or empty.
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(ChatMessage::text_content)
            .unwrap_or_default()
    }
}

/// Unit-length embedding of a piece of text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// L2-normalizes `raw`. Fails on empty or zero-norm input.
    pub fn normalized(raw: Vec<f32>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Protocol("embedding has zero length".into()));
        }
        let norm = raw
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Protocol("embedding has zero or non-finite norm".into()));
        }
        let values = raw
            .into_iter()
            .map(|v| (f64::from(v) / norm) as f32)
            .collect();
        Ok(Self { values })
    }

    /// Wraps values already known to be unit length (e.g. loaded from the index).
    pub fn from_unit(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &[f32]) -> f64 {
        dot(&self.values, other)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub guidance_scale: f64,
    pub negative_weight: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            negative_weight: DEFAULT_NEGATIVE_WEIGHT,
            width: 1024,
            height: 1024,
        }
    }
}

/// A generated or edited image together with the inputs that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArtifact {
    pub bytes: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub positive_prompt: String,
    pub negative_prompt: String,
    pub guidance_scale: f64,
    pub parent: Option<Arc<ImageArtifact>>,
}

impl ImageArtifact {
    /// Number of edits between this artifact and the initial generation.
    pub fn edit_depth(&self) -> usize {
        let mut depth = 0;
        let mut cur = self.parent.as_deref();
        while let Some(p) = cur {
            depth += 1;
            cur = p.parent.as_deref();
        }
        depth
    }

    pub fn sha256_hex(&self) -> String {
        hex_digest(&self.bytes)
    }

    /// Checks that the bytes decode as a PNG of the stated size.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = png_dimensions(&self.bytes)?;
        if (w, h) != (self.width, self.height) {
            return Err(Error::Decode(format!(
                "PNG is {w}x{h} but artifact claims {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Decodes a PNG header and returns its dimensions.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32)> {
    let decoder = png::Decoder::new(bytes);
    let reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(format!("payload is not a valid PNG: {e}")))?;
    let info = reader.info();
    Ok((info.width, info.height))
}

/// Encodes a solid-color RGB PNG.
pub fn solid_png(rgb: [u8; 3], width: u32, height: u32) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("in-memory PNG header");
        let pixels: Vec<u8> = rgb
            .iter()
            .copied()
            .cycle()
            .take((width * height * 3) as usize)
            .collect();
        writer
            .write_image_data(&pixels)
            .expect("in-memory PNG data");
    }
    out
}

pub trait ChatBackend: Send + Sync {
    /// Returns the assistant text of the first completion choice.
    fn chat_complete(&self, req: &ChatRequest) -> Result<String>;
}

pub trait EmbedBackend: Send + Sync {
    /// Raw, not necessarily normalized, embedding of `text`.
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>>;
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, pos: &str, neg: &str, seed: u64, cfg: &GenerationParams)
        -> Result<ImageArtifact>;
}

pub trait ImageEditor: Send + Sync {
    fn edit(
        &self,
        base: &Arc<ImageArtifact>,
        pos: &str,
        neg: &str,
        seed: u64,
        cfg: &GenerationParams,
    ) -> Result<ImageArtifact>;
}

/// Validates `req` and forwards it to the backend.
pub fn chat_complete(chat: &dyn ChatBackend, req: &ChatRequest) -> Result<String> {
    req.validate()?;
    let text = chat.chat_complete(req)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyCompletion);
    }
    Ok(text)
}

/// Embeds `text` and L2-normalizes the result. `expected_dim` is the
/// dimension the consuming store was opened with.
pub fn embed_text(
    backend: &dyn EmbedBackend,
    text: &str,
    expected_dim: usize,
) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::Precondition("cannot embed empty text".into()));
    }
    let raw = backend.embed_raw(text)?;
    if raw.len() != expected_dim {
        return Err(Error::DimensionMismatch {
            expected: expected_dim,
            actual: raw.len(),
        });
    }
    EmbeddingVector::normalized(raw)
}

pub fn generate_image(
    backend: &dyn ImageGenerator,
    pos: &str,
    neg: &str,
    seed: u64,
    cfg: &GenerationParams,
) -> Result<ImageArtifact> {
    if pos.trim().is_empty() {
        return Err(Error::Precondition("positive prompt is empty".into()));
    }
    if cfg.guidance_scale.is_nan() || cfg.guidance_scale <= 0.0 {
        return Err(Error::Precondition(format!(
            "guidance_scale must be > 0, got {}",
            cfg.guidance_scale
        )));
    }
    let mut img = backend.generate(pos, neg, seed, cfg)?;
    img.validate()?;
    img.parent = None;
    img.seed = seed;
    img.positive_prompt = pos.to_string();
    img.negative_prompt = neg.to_string();
    img.guidance_scale = cfg.guidance_scale;
    Ok(img)
}

pub fn edit_image(
    backend: &dyn ImageEditor,
    base: Option<&Arc<ImageArtifact>>,
    pos: &str,
    neg: &str,
    seed: u64,
    cfg: &GenerationParams,
) -> Result<ImageArtifact> {
    let base = base.ok_or(Error::MissingBaseImage)?;
    base.validate()?;
    if pos.trim().is_empty() {
        return Err(Error::Precondition("edit instruction is empty".into()));
    }
    if cfg.guidance_scale.is_nan() || cfg.guidance_scale <= 0.0 {
        return Err(Error::Precondition(format!(
            "guidance_scale must be > 0, got {}",
            cfg.guidance_scale
        )));
    }
    let mut img = backend.edit(base, pos, neg, seed, cfg)?;
    img.validate()?;
    img.parent = Some(Arc::clone(base));
    img.seed = seed;
    img.positive_prompt = pos.to_string();
    img.negative_prompt = neg.to_string();
    img.guidance_scale = cfg.guidance_scale;
    Ok(img)
}

/// The complete set of capabilities a workflow needs.
#[derive(Clone)]
pub struct BackendSet {
    pub chat: Arc<dyn ChatBackend>,
    pub embed: Arc<dyn EmbedBackend>,
    pub gen: Arc<dyn ImageGenerator>,
    pub edit: Arc<dyn ImageEditor>,
}

impl fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendSet").finish_non_exhaustive()
    }
}

/// A backend set where any capability may still be missing.
#[derive(Default, Clone)]
pub struct PartialBackendSet {
    pub chat: Option<Arc<dyn ChatBackend>>,
    pub embed: Option<Arc<dyn EmbedBackend>>,
    pub gen: Option<Arc<dyn ImageGenerator>>,
    pub edit: Option<Arc<dyn ImageEditor>>,
}

impl PartialBackendSet {
    /// Fails unless all four capabilities are present.
    pub fn complete(self) -> Result<BackendSet> {
        let missing: Vec<&str> = [
            ("chat", self.chat.is_none()),
            ("embed", self.embed.is_none()),
            ("gen", self.gen.is_none()),
            ("edit", self.edit.is_none()),
        ]
        .into_iter()
        .filter_map(|(n, m)| m.then_some(n))
        .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "backend set incomplete, missing: {}",
                missing.join(", ")
            )));
        }
        Ok(BackendSet {
            chat: self.chat.unwrap(),
            embed: self.embed.unwrap(),
            gen: self.gen.unwrap(),
            edit: self.edit.unwrap(),
        })
    }
}
