//! Model interfaces used by the pipeline: a completion LLM for answers, a
//! chat LLM for knowledge and automatic rationales, a traceable LM exposing
//! attention and gradients, an image captioner, and a QA-pair generator.
//! Deterministic scripted fakes live in [`fakes`], a tiny in-repo transformer
//! with exact attention gradients in [`tiny`], OpenAI-compatible HTTP
//! adapters in [`http`], and cache wrappers in [`cached`].

pub mod cached;
pub mod fakes;
pub mod http;
pub mod tiny;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::RenderedPrompt;
use crate::types::{Caption, DecodeParams, QAPair};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend transport failure (retryable): {0}")]
    Transport(String),
    #[error("prompt exceeds context window: {measured} tokens > {limit}")]
    ContextOverflow { measured: usize, limit: usize },
    #[error("backend lacks capability: {0}")]
    Capability(String),
    #[error("scripted fake has no reply for prompt digest {digest}")]
    ScriptMiss { digest: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("expected a {expected} prompt")]
    WrongPromptKind { expected: &'static str },
    #[error("gradient computation failed at answer step {step}: {reason}")]
    Gradient { step: usize, reason: String },
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
}

/// One answer step of a generation trace: per-head attention over the
/// `N_P + k - 1` visible tokens, the matching gradients of the answer-token
/// probability, and that probability itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub attention: Vec<Vec<f64>>,
    pub gradient: Vec<Vec<f64>>,
    pub token_prob: f64,
}

/// Attention/gradient trace of one greedy generation, taken at a single
/// configured layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt_token_count: usize,
    pub answer_token_count: usize,
    pub head_count: usize,
    pub steps: Vec<TraceStep>,
    /// Byte span of each prompt token in the prompt text.
    pub prompt_token_spans: Vec<(usize, usize)>,
}

impl GenerationTrace {
    /// Checks the structural invariants: step k sees `N_P + k - 1` tokens,
    /// attention rows are non-negative and sum to 1 within `1e-4`, and token
    /// probabilities lie in (0, 1].
    pub fn validate(&self) -> Result<(), String> {
        if self.steps.len() != self.answer_token_count {
            return Err(format!(
                "expected {} steps, got {}",
                self.answer_token_count,
                self.steps.len()
            ));
        }
        if self.prompt_token_spans.len() != self.prompt_token_count {
            return Err("prompt token map length mismatch".into());
        }
        for (i, step) in self.steps.iter().enumerate() {
            let k = i + 1;
            let n_k = self.prompt_token_count + k - 1;
            if step.attention.len() != self.head_count || step.gradient.len() != self.head_count {
                return Err(format!("step {k}: head count mismatch"));
            }
            for (a, g) in step.attention.iter().zip(&step.gradient) {
                if a.len() != n_k || g.len() != n_k {
                    return Err(format!("step {k}: expected vectors of length {n_k}"));
                }
                if a.iter().any(|&x| x < 0.0) {
                    return Err(format!("step {k}: negative attention weight"));
                }
                let sum: f64 = a.iter().sum();
                if (sum - 1.0).abs() > 1e-4 {
                    return Err(format!("step {k}: attention sums to {sum}"));
                }
            }
            if !(step.token_prob > 0.0 && step.token_prob <= 1.0) {
                return Err(format!("step {k}: token_prob {} out of range", step.token_prob));
            }
        }
        Ok(())
    }
}

/// Which layer's attention feeds the mechanistic-rationale attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionLayer {
    Last,
    Index(usize),
}

impl Default for AttributionLayer {
    fn default() -> Self {
        AttributionLayer::Last
    }
}

/// Configuration for one backend role, read from the run config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub model_id: String,
    /// Endpoint URL or local fixture/model path, depending on `kind`.
    #[serde(default)]
    pub location: String,
    pub decode: DecodeParams,
    #[serde(default)]
    pub attribution_layer: AttributionLayer,
    /// Maximum concurrent calls the adapter tolerates; 1 serializes.
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_concurrency() -> usize {
    4
}

pub trait CompletionBackend: Send + Sync {
    fn model_id(&self) -> &str;

    /// Generates a continuation for a completion prompt. Deterministic under
    /// greedy decoding or a fixed seed.
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<String, BackendError>;
}

pub trait ChatBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn chat(&self, prompt: &RenderedPrompt, params: &DecodeParams)
        -> Result<String, BackendError>;
}

pub trait TraceBackend: Send + Sync {
    fn model_id(&self) -> &str;

    /// Greedy generation plus an attention/gradient trace obtained by
    /// teacher-forcing the generated answer. The answer text must be
    /// byte-identical to `complete` under the same params.
    fn generate_with_trace(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<(String, GenerationTrace), BackendError>;
}

pub trait Captioner: Send + Sync {
    /// Produces exactly `n` question-guided captions for the image.
    fn caption(
        &self,
        image_ref: &str,
        question: &str,
        n: usize,
    ) -> Result<Vec<Caption>, BackendError>;
}

pub trait QaPairGenerator: Send + Sync {
    /// Produces exactly `n` QA pairs grounded in the captions.
    fn generate_qa_pairs(&self, captions: &[Caption], n: usize)
        -> Result<Vec<QAPair>, BackendError>;
}

pub(crate) fn completion_text<'a>(
    prompt: &'a RenderedPrompt,
) -> Result<&'a str, BackendError> {
    match prompt {
        RenderedPrompt::Completion { text } => Ok(text),
        RenderedPrompt::Chat { .. } => Err(BackendError::WrongPromptKind {
            expected: "completion",
        }),
    }
}

pub(crate) fn require_chat(prompt: &RenderedPrompt) -> Result<(), BackendError> {
    match prompt {
        RenderedPrompt::Chat { .. } => Ok(()),
        RenderedPrompt::Completion { .. } => Err(BackendError::WrongPromptKind { expected: "chat" }),
    }
}
