use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::backends::structured::DEFAULT_REPAIR_ATTEMPTS;
use crate::backends::{chat_complete_structured, ChatBackend, ChatRequest, SchemaId};
use crate::error::{Error, Result};
use crate::guidance::NodeGuidance;
use crate::orchestrator::assemble_agent_prompt;
use crate::prompts::{SlotMap, TemplateId, Templates};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Total structured-output attempts per agent call.
    pub repair_attempts: u32,
}

impl Default for AgentOptions {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 4096,
            seed: None,
            repair_attempts: DEFAULT_REPAIR_ATTEMPTS,
        }
    }
}

/// Everything an LLM-backed agent needs to make a call.
#[derive(Clone)]
pub struct AgentContext {
    pub chat: Arc<dyn ChatBackend>,
    pub templates: Arc<Templates>,
    pub opts: AgentOptions,
}

impl AgentContext {
    pub fn new(chat: Arc<dyn ChatBackend>, templates: Arc<Templates>, opts: AgentOptions) -> Self {
        Self {
            chat,
            templates,
            opts,
        }
    }

    pub fn request(
        &self,
        template: TemplateId,
        slots: &SlotMap,
        payload: &Value,
        guidance: Option<&NodeGuidance>,
        images: &[&[u8]],
    ) -> Result<ChatRequest> {
        let mut req = assemble_agent_prompt(&self.templates, template, slots, payload, guidance)?;
        if let Some(user) = req.messages.last_mut() {
            for img in images {
                user.push_png(img);
            }
        }
        req.temperature = self.opts.temperature;
        req.max_tokens = self.opts.max_tokens;
        req.seed = self.opts.seed;
        Ok(req)
    }

    /// Assembles, sends, validates and decodes one agent call.
    pub fn call<T: DeserializeOwned>(
        &self,
        template: TemplateId,
        schema: SchemaId,
        slots: &SlotMap,
        payload: &Value,
        guidance: Option<&NodeGuidance>,
        images: &[&[u8]],
    ) -> Result<T> {
        let req = self.request(template, slots, payload, guidance, images)?;
        let value = chat_complete_structured(self.chat.as_ref(), &req, schema, self.opts.repair_attempts)?;
        serde_json::from_value(value).map_err(|e| Error::SchemaViolation {
            schema,
            attempts: self.opts.repair_attempts,
            message: e.to_string(),
        })
    }
}
