//! Minimal OpenAI-compatible HTTP adapters for locally hosted models, used by
//! the optional smoke run. Attribution is not available over HTTP, so the
//! trace capability reports an error and the pipeline degrades per its rules.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    completion_text, require_chat, BackendError, ChatBackend, CompletionBackend, GenerationTrace,
    TraceBackend,
};
use crate::prompts::{RenderedPrompt, Role};
use crate::types::{DecodeMode, DecodeParams};

pub struct HttpLm {
    model_id: String,
    base_url: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_k: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

impl HttpLm {
    pub fn new(model_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        HttpLm {
            model_id: model_id.into(),
            base_url: base_url.into(),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn decode_fields(params: &DecodeParams) -> (f64, Option<u32>, Option<u64>) {
        match params.mode {
            DecodeMode::Greedy => (0.0, None, None),
            DecodeMode::TopK => (params.temperature, Some(params.k), params.seed),
        }
    }
}

impl CompletionBackend for HttpLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<String, BackendError> {
        let text = completion_text(prompt)?;
        let (temperature, top_k, seed) = Self::decode_fields(params);
        let req = CompletionRequest {
            model: &self.model_id,
            prompt: text,
            max_tokens: params.max_new_tokens,
            temperature,
            top_k,
            seed,
        };
        let resp: CompletionResponse = self
            .client
            .post(format!("{}/v1/completions", self.base_url))
            .json(&req)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?
            .error_for_status()
            .map_err(|e| BackendError::Transport(e.to_string()))?
            .json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| BackendError::Transport("empty choices".into()))
    }
}

impl ChatBackend for HttpLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn chat(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<String, BackendError> {
        require_chat(prompt)?;
        let messages = match prompt {
            RenderedPrompt::Chat { messages } => messages,
            _ => unreachable!(),
        };
        let (temperature, top_k, seed) = Self::decode_fields(params);
        let payload = json!({
            "model": self.model_id,
            "messages": messages.iter().map(|m| json!({
                "role": match m.role { Role::User => "user", Role::Assistant => "assistant" },
                "content": m.content,
            })).collect::<Vec<_>>(),
            "max_tokens": params.max_new_tokens,
            "temperature": temperature,
            "top_k": top_k,
            "seed": seed,
        });
        let resp: ChatResponse = self
            .client
            .post(format!("{}/v1/chat/completions", self.base_url))
            .json(&payload)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?
            .error_for_status()
            .map_err(|e| BackendError::Transport(e.to_string()))?
            .json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Transport("empty choices".into()))
    }
}

impl TraceBackend for HttpLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate_with_trace(
        &self,
        _prompt: &RenderedPrompt,
        _params: &DecodeParams,
    ) -> Result<(String, GenerationTrace), BackendError> {
        Err(BackendError::Capability(
            "HTTP backends do not expose attention".into(),
        ))
    }
}
