//! Diversification: build the three decision contexts (captions only,
//! one-sentence knowledge, long-form knowledge) and one answer candidate per
//! context. The same caption-derived QA pairs demonstrate the task in every
//! strategy's prompt.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, Captioner, ChatBackend, CompletionBackend, QaPairGenerator,
};
use crate::prompts::{build_answer_prompt, build_knowledge_prompt, KnowledgeForm, PromptError};
use crate::text::{parse_answer, split_sentences};
use crate::types::{AnswerCandidate, Caption, DecisionContext, DecodeParams, QAPair, StrategyKind};

#[derive(Debug, Error)]
pub enum DiversifyError {
    #[error("captions must be non-empty")]
    NoCaptions,
    #[error("knowledge reply was empty")]
    EmptyKnowledge,
    #[error("parsed answer was empty")]
    EmptyAnswer,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Joins captions into the caption-only context: trailing periods are
/// deduplicated and captions joined with ". ", so each caption is one
/// sentence of the context.
pub fn build_caption_context(captions: &[Caption]) -> Result<DecisionContext, DiversifyError> {
    if captions.is_empty() {
        return Err(DiversifyError::NoCaptions);
    }
    let stripped: Vec<&str> = captions
        .iter()
        .map(|c| c.text.trim().trim_end_matches('.'))
        .collect();
    let text = format!("{}.", stripped.join(". "));
    Ok(DecisionContext::new(StrategyKind::CaptionOnly, text))
}

/// The caption block as interpolated into knowledge prompts.
pub fn captions_block(captions: &[Caption]) -> String {
    build_caption_context(captions)
        .map(|c| c.text)
        .unwrap_or_default()
}

pub struct KnowledgeOutcome {
    pub context: DecisionContext,
    pub truncated_to_one_sentence: bool,
}

/// Generates a knowledge context from the chat model. Short-form replies with
/// more than one sentence are truncated to the first sentence, with the
/// truncation reported to the caller.
pub fn generate_knowledge_context(
    chat: &Arc<dyn ChatBackend>,
    captions_block: &str,
    pairs: &[QAPair],
    question: &str,
    form: KnowledgeForm,
    params: &DecodeParams,
) -> Result<KnowledgeOutcome, DiversifyError> {
    let prompt = build_knowledge_prompt(captions_block, pairs, question, form)?;
    let reply = chat.chat(&prompt, params)?;
    let reply = strip_role_prefix(reply.trim()).trim().to_string();
    if reply.is_empty() {
        return Err(DiversifyError::EmptyKnowledge);
    }
    let kind = match form {
        KnowledgeForm::Short => StrategyKind::ShortKnowledge,
        KnowledgeForm::Long => StrategyKind::LongKnowledge,
    };
    let (text, truncated) = if form == KnowledgeForm::Short {
        let spans = split_sentences(&reply);
        match spans.as_slice() {
            [] => return Err(DiversifyError::EmptyKnowledge),
            [_] => (reply.clone(), false),
            [first, ..] => (reply[first.0..first.1].to_string(), true),
        }
    } else {
        (reply, false)
    };
    Ok(KnowledgeOutcome {
        context: DecisionContext::new(kind, text),
        truncated_to_one_sentence: truncated,
    })
}

fn strip_role_prefix(reply: &str) -> &str {
    for prefix in ["Assistant:", "assistant:"] {
        if let Some(rest) = reply.strip_prefix(prefix) {
            return rest;
        }
    }
    reply
}

/// Answers the question from one decision context with greedy decoding.
pub fn answer_from_context(
    base: &Arc<dyn CompletionBackend>,
    context: &DecisionContext,
    pairs: &[QAPair],
    question: &str,
    params: &DecodeParams,
) -> Result<AnswerCandidate, DiversifyError> {
    let prompt = build_answer_prompt(&context.text, pairs, question)?;
    let raw_output = base.complete(&prompt, params)?;
    let answer = parse_answer(&raw_output);
    if answer.is_empty() {
        return Err(DiversifyError::EmptyAnswer);
    }
    Ok(AnswerCandidate {
        strategy: context.kind,
        answer,
        raw_output,
    })
}

/// One strategy's result: its context and, when the strategy succeeded, its
/// candidate. Failed strategies keep the failure description so runs degrade
/// instead of aborting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub kind: StrategyKind,
    pub context: Option<DecisionContext>,
    pub candidate: Option<AnswerCandidate>,
    pub failure: Option<String>,
    pub warnings: Vec<String>,
}

/// Output of the diversification stage for one question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diversified {
    pub captions: Vec<Caption>,
    pub pairs: Vec<QAPair>,
    pub outcomes: Vec<StrategyOutcome>,
}

impl Diversified {
    pub fn outcome(&self, kind: StrategyKind) -> Option<&StrategyOutcome> {
        self.outcomes.iter().find(|o| o.kind == kind)
    }

    pub fn present_candidates(&self) -> Vec<&AnswerCandidate> {
        self.outcomes
            .iter()
            .filter_map(|o| o.candidate.as_ref())
            .collect()
    }
}

pub struct DiversifyBackends {
    pub captioner: Arc<dyn Captioner>,
    pub qa_gen: Arc<dyn QaPairGenerator>,
    pub chat: Arc<dyn ChatBackend>,
    pub base: Arc<dyn CompletionBackend>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversifyConfig {
    pub strategies: Vec<StrategyKind>,
    pub captions_per_image: usize,
    pub qa_pairs_per_image: usize,
    pub chat_params: DecodeParams,
    pub base_params: DecodeParams,
}

impl Default for DiversifyConfig {
    fn default() -> Self {
        DiversifyConfig {
            strategies: StrategyKind::ALL.to_vec(),
            captions_per_image: 30,
            qa_pairs_per_image: 30,
            chat_params: DecodeParams::top_k_50(128, Some(0)),
            base_params: DecodeParams::greedy(16),
        }
    }
}

/// Runs the diversification stage for one question. A captioning failure
/// aborts the question; a single strategy failure leaves a gap in its
/// outcome. Outcomes are ordered caption_only, short_knowledge,
/// long_knowledge regardless of the configured subset.
pub fn diversification(
    image_ref: &str,
    question: &str,
    backends: &DiversifyBackends,
    config: &DiversifyConfig,
) -> Result<Diversified, DiversifyError> {
    let captions = backends
        .captioner
        .caption(image_ref, question, config.captions_per_image)?;
    let pairs = backends
        .qa_gen
        .generate_qa_pairs(&captions, config.qa_pairs_per_image)?;
    let caption_block = captions_block(&captions);

    let mut outcomes = Vec::new();
    for kind in StrategyKind::ALL {
        if !config.strategies.contains(&kind) {
            continue;
        }
        let outcome = run_strategy(
            kind,
            &captions,
            &caption_block,
            &pairs,
            question,
            backends,
            config,
        );
        outcomes.push(outcome);
    }
    Ok(Diversified {
        captions,
        pairs,
        outcomes,
    })
}

fn run_strategy(
    kind: StrategyKind,
    captions: &[Caption],
    caption_block: &str,
    pairs: &[QAPair],
    question: &str,
    backends: &DiversifyBackends,
    config: &DiversifyConfig,
) -> StrategyOutcome {
    let mut warnings = Vec::new();
    let context = match kind {
        StrategyKind::CaptionOnly => build_caption_context(captions).map_err(|e| e.to_string()),
        StrategyKind::ShortKnowledge | StrategyKind::LongKnowledge => {
            let form = if kind == StrategyKind::ShortKnowledge {
                KnowledgeForm::Short
            } else {
                KnowledgeForm::Long
            };
            generate_knowledge_context(
                &backends.chat,
                caption_block,
                pairs,
                question,
                form,
                &config.chat_params,
            )
            .map(|out| {
                if out.truncated_to_one_sentence {
                    warnings.push("short knowledge truncated to first sentence".to_string());
                }
                out.context
            })
            .map_err(|e| e.to_string())
        }
    };
    match context {
        Err(failure) => StrategyOutcome {
            kind,
            context: None,
            candidate: None,
            failure: Some(failure),
            warnings,
        },
        Ok(context) => {
            match answer_from_context(&backends.base, &context, pairs, question, &config.base_params)
            {
                Ok(candidate) => StrategyOutcome {
                    kind,
                    context: Some(context),
                    candidate: Some(candidate),
                    failure: None,
                    warnings,
                },
                Err(e) => StrategyOutcome {
                    kind,
                    context: Some(context),
                    candidate: None,
                    failure: Some(e.to_string()),
                    warnings,
                },
            }
        }
    }
}
