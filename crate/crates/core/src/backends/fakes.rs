//! Deterministic scripted fakes. Replies are keyed by a digest of the
//! canonical prompt bytes; an unknown digest is an explicit miss, never a
//! silent empty string. Every fake counts its calls so tests can assert that
//! a warm cache performs zero backend calls.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    completion_text, require_chat, BackendError, Captioner, ChatBackend, CompletionBackend,
    GenerationTrace, QaPairGenerator, TraceBackend, TraceStep,
};
use crate::prompts::RenderedPrompt;
use crate::store::prompt_digest;
use crate::types::{Caption, DecodeParams, QAPair};

#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, BackendError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| BackendError::Input(format!("fixture {}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| BackendError::Input(format!("fixture {}: {e}", path.display())))
}

/// Scripted completion or chat model: digest of the canonical prompt text →
/// reply.
pub struct ScriptedLm {
    model_id: String,
    replies: HashMap<String, String>,
    pub calls: Arc<CallCounter>,
}

impl ScriptedLm {
    pub fn new(model_id: impl Into<String>, replies: HashMap<String, String>) -> Self {
        ScriptedLm {
            model_id: model_id.into(),
            replies,
            calls: Arc::new(CallCounter::default()),
        }
    }

    pub fn from_fixture(model_id: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(model_id, load_json(path)?))
    }

    /// Registers a reply for a prompt, returning its digest.
    pub fn script(&mut self, prompt: &RenderedPrompt, reply: impl Into<String>) -> String {
        let digest = prompt_digest(prompt.canonical_text().as_bytes());
        self.replies.insert(digest.clone(), reply.into());
        digest
    }

    fn lookup(&self, prompt: &RenderedPrompt) -> Result<String, BackendError> {
        self.calls.bump();
        let digest = prompt_digest(prompt.canonical_text().as_bytes());
        self.replies
            .get(&digest)
            .cloned()
            .ok_or(BackendError::ScriptMiss { digest })
    }
}

impl CompletionBackend for ScriptedLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        _params: &DecodeParams,
    ) -> Result<String, BackendError> {
        completion_text(prompt)?;
        self.lookup(prompt)
    }
}

impl ChatBackend for ScriptedLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn chat(
        &self,
        prompt: &RenderedPrompt,
        _params: &DecodeParams,
    ) -> Result<String, BackendError> {
        require_chat(prompt)?;
        self.lookup(prompt)
    }
}

/// One scripted trace entry: the reply, plus an optional substring of the
/// prompt on which the synthetic attention mass should concentrate. Tests use
/// `focus` to steer which context sentence wins the attribution argmax.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedTraceEntry {
    pub reply: String,
    #[serde(default)]
    pub focus: Option<String>,
}

/// Scripted traceable model. The answer text comes from the script; the trace
/// is synthesized deterministically from the prompt bytes: single head,
/// whitespace-preserving character tokenization, attention concentrated on
/// the `focus` substring when given and uniform otherwise. Focus tokens also
/// get a large gradient so they stay dominant after the per-step softmax
/// renormalization.
pub struct ScriptedTraceLm {
    model_id: String,
    replies: HashMap<String, ScriptedTraceEntry>,
    pub calls: Arc<CallCounter>,
}

impl ScriptedTraceLm {
    pub fn new(model_id: impl Into<String>, replies: HashMap<String, ScriptedTraceEntry>) -> Self {
        ScriptedTraceLm {
            model_id: model_id.into(),
            replies,
            calls: Arc::new(CallCounter::default()),
        }
    }

    pub fn from_fixture(model_id: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(model_id, load_json(path)?))
    }

    pub fn script(
        &mut self,
        prompt: &RenderedPrompt,
        reply: impl Into<String>,
        focus: Option<String>,
    ) -> String {
        let digest = prompt_digest(prompt.canonical_text().as_bytes());
        self.replies.insert(
            digest.clone(),
            ScriptedTraceEntry {
                reply: reply.into(),
                focus,
            },
        );
        digest
    }

    fn entry(&self, prompt: &RenderedPrompt) -> Result<&ScriptedTraceEntry, BackendError> {
        let digest = prompt_digest(prompt.canonical_text().as_bytes());
        self.replies
            .get(&digest)
            .ok_or(BackendError::ScriptMiss { digest })
    }
}

impl CompletionBackend for ScriptedTraceLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        _params: &DecodeParams,
    ) -> Result<String, BackendError> {
        completion_text(prompt)?;
        self.calls.bump();
        Ok(self.entry(prompt)?.reply.clone())
    }
}

impl TraceBackend for ScriptedTraceLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate_with_trace(
        &self,
        prompt: &RenderedPrompt,
        _params: &DecodeParams,
    ) -> Result<(String, GenerationTrace), BackendError> {
        let text = completion_text(prompt)?.to_string();
        self.calls.bump();
        let entry = self.entry(prompt)?.clone();

        // one char = one token, so the char map is the identity
        let spans: Vec<(usize, usize)> = text
            .char_indices()
            .map(|(i, c)| (i, i + c.len_utf8()))
            .collect();
        let n_p = spans.len();
        let n_a = entry.reply.chars().count().max(1);

        let focus_range = entry
            .focus
            .as_deref()
            .and_then(|f| text.find(f).map(|s| (s, s + f.len())));
        let focus_tokens: Vec<usize> = match focus_range {
            Some((s, e)) => spans
                .iter()
                .enumerate()
                .filter(|(_, &(ts, _))| ts >= s && ts < e)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        };

        let mut steps = Vec::with_capacity(n_a);
        for k in 1..=n_a {
            let n_k = n_p + k - 1;
            let mut row = vec![0.0_f64; n_k];
            if focus_tokens.is_empty() {
                for x in &mut row {
                    *x = 1.0 / n_k as f64;
                }
            } else {
                // 90% of the mass on the focus tokens, the rest uniform
                let focus_share = 0.9 / focus_tokens.len() as f64;
                let rest = n_k - focus_tokens.len();
                let rest_share = if rest > 0 { 0.1 / rest as f64 } else { 0.0 };
                for (i, x) in row.iter_mut().enumerate() {
                    *x = if focus_tokens.contains(&i) {
                        focus_share
                    } else {
                        rest_share
                    };
                }
                if rest == 0 {
                    for x in &mut row {
                        *x += 0.1 / n_k as f64;
                    }
                }
            }
            let mut grad = vec![1.0_f64; n_k];
            for &i in &focus_tokens {
                grad[i] = 200.0;
            }
            steps.push(TraceStep {
                attention: vec![row],
                gradient: vec![grad],
                token_prob: 0.5,
            });
        }

        let trace = GenerationTrace {
            prompt_token_count: n_p,
            answer_token_count: n_a,
            head_count: 1,
            steps,
            prompt_token_spans: spans,
        };
        Ok((entry.reply, trace))
    }
}

/// Scripted captioner: image_ref → ordered caption list.
pub struct ScriptedCaptioner {
    captions: HashMap<String, Vec<String>>,
    pub calls: Arc<CallCounter>,
}

impl ScriptedCaptioner {
    pub fn new(captions: HashMap<String, Vec<String>>) -> Self {
        ScriptedCaptioner {
            captions,
            calls: Arc::new(CallCounter::default()),
        }
    }

    pub fn from_fixture(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(load_json(path)?))
    }
}

impl Captioner for ScriptedCaptioner {
    fn caption(
        &self,
        image_ref: &str,
        _question: &str,
        n: usize,
    ) -> Result<Vec<Caption>, BackendError> {
        self.calls.bump();
        if n == 0 {
            return Err(BackendError::Input("caption count must be >= 1".into()));
        }
        let list = self
            .captions
            .get(image_ref)
            .ok_or_else(|| BackendError::Input(format!("no captions scripted for {image_ref}")))?;
        if list.len() < n {
            return Err(BackendError::Input(format!(
                "fixture has {} captions for {image_ref}, {n} requested",
                list.len()
            )));
        }
        Ok(list[..n].iter().map(Caption::new).collect())
    }
}

/// Digest used to key scripted QA pairs: hash of the captions joined by
/// newlines.
pub fn captions_digest(captions: &[Caption]) -> String {
    let joined: Vec<&str> = captions.iter().map(|c| c.text.as_str()).collect();
    let mut hasher = Sha256::new();
    hasher.update(joined.join("\n").as_bytes());
    format!("{:x}", hasher.finalize())
}

/// Scripted QA-pair generator keyed by [`captions_digest`].
pub struct ScriptedQaGen {
    pairs: HashMap<String, Vec<QAPair>>,
    pub calls: Arc<CallCounter>,
}

impl ScriptedQaGen {
    pub fn new(pairs: HashMap<String, Vec<QAPair>>) -> Self {
        ScriptedQaGen {
            pairs,
            calls: Arc::new(CallCounter::default()),
        }
    }

    pub fn from_fixture(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(load_json(path)?))
    }

    pub fn script(&mut self, captions: &[Caption], pairs: Vec<QAPair>) {
        self.pairs.insert(captions_digest(captions), pairs);
    }
}

impl QaPairGenerator for ScriptedQaGen {
    fn generate_qa_pairs(
        &self,
        captions: &[Caption],
        n: usize,
    ) -> Result<Vec<QAPair>, BackendError> {
        self.calls.bump();
        if n == 0 {
            return Err(BackendError::Input("qa pair count must be >= 1".into()));
        }
        if captions.is_empty() {
            return Err(BackendError::Input("captions must be non-empty".into()));
        }
        let key = captions_digest(captions);
        let list = self
            .pairs
            .get(&key)
            .ok_or_else(|| BackendError::Input(format!("no QA pairs scripted for digest {key}")))?;
        if list.len() < n {
            return Err(BackendError::Input(format!(
                "fixture has {} QA pairs, {n} requested",
                list.len()
            )));
        }
        Ok(list[..n].to_vec())
    }
}
