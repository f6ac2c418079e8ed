//! Rationale generation. The automatic rationale is an LLM-written
//! one-sentence summary; the mechanistic rationale is the decision-context
//! sentence with the highest gradient-weighted attention contribution to the
//! generated answer: per-step relevance is the head-averaged product of
//! clamped gradients and attention weights, per-step vectors are softmaxed
//! over the prompt tokens and summed over answer steps, and token mass is
//! aggregated per sentence.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, GenerationTrace, TraceBackend};
use crate::prompts::{build_answer_prompt, build_auto_rationale_prompt, PromptError};
use crate::text::split_sentences;
use crate::types::{
    AnswerCandidate, DecisionContext, DecodeParams, QAPair, Rationale, StrategyKind,
};

#[derive(Debug, Error)]
pub enum RationalizeError {
    #[error("attention and gradient shapes disagree")]
    ShapeMismatch,
    #[error("no answer steps to aggregate")]
    EmptySteps,
    #[error("relevance vector shorter than prompt token count")]
    ShortVector,
    #[error("decision context not locatable in the prompt")]
    ContextNotInPrompt,
    #[error("model reply was empty")]
    EmptyReply,
    #[error("traced answer has no tokens")]
    EmptyAnswer,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Per-token and per-sentence contribution of the prompt to the answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelevanceProfile {
    /// Aggregated relevance of each prompt token; sums to the answer token
    /// count.
    pub per_token: Vec<f64>,
    pub per_sentence: Vec<(usize, f64)>,
    pub argmax_sentence: usize,
}

/// Per-step token relevance: head-averaged elementwise product of the
/// non-negative part of the gradient with the attention weights.
pub fn token_relevance(
    attn: &[Vec<f64>],
    grads: &[Vec<f64>],
) -> Result<Vec<f64>, RationalizeError> {
    if attn.is_empty() || attn.len() != grads.len() {
        return Err(RationalizeError::ShapeMismatch);
    }
    let n = attn[0].len();
    if attn.iter().chain(grads.iter()).any(|v| v.len() != n) {
        return Err(RationalizeError::ShapeMismatch);
    }
    let h = attn.len() as f64;
    let mut r = vec![0.0; n];
    for (a, g) in attn.iter().zip(grads) {
        for i in 0..n {
            r[i] += g[i].max(0.0) * a[i];
        }
    }
    for x in &mut r {
        *x /= h;
    }
    Ok(r)
}

/// Re-normalizes each step's relevance over the first `n_prompt` components
/// with a softmax and sums across steps. The result has length `n_prompt` and
/// sums to the number of answer steps.
pub fn aggregate_relevance(
    step_relevance: &[Vec<f64>],
    n_prompt: usize,
) -> Result<Vec<f64>, RationalizeError> {
    if step_relevance.is_empty() {
        return Err(RationalizeError::EmptySteps);
    }
    let mut total = vec![0.0; n_prompt];
    for r_k in step_relevance {
        if r_k.len() < n_prompt {
            return Err(RationalizeError::ShortVector);
        }
        let head = &r_k[..n_prompt];
        let max = head.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = head.iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (t, e) in total.iter_mut().zip(&exps) {
            *t += e / sum;
        }
    }
    Ok(total)
}

/// Sums token relevance per context sentence. `context_offset` is the byte
/// position of the context text inside the prompt; a token belongs to the
/// sentence containing its first byte, and tokens outside the context
/// sentences (instruction, QA pairs, question) are excluded.
pub fn sentence_relevance(
    per_token: &[f64],
    context: &DecisionContext,
    prompt_token_spans: &[(usize, usize)],
    context_offset: usize,
) -> Result<RelevanceProfile, RationalizeError> {
    if context.sentence_spans.is_empty() {
        return Err(RationalizeError::ContextNotInPrompt);
    }
    let mut scores = vec![0.0; context.sentence_spans.len()];
    let mut any_token_in_context = false;
    for (tok, &(tok_start, _)) in prompt_token_spans.iter().enumerate() {
        if tok >= per_token.len() {
            break;
        }
        let Some(rel) = tok_start.checked_sub(context_offset) else {
            continue;
        };
        for (si, &(s, e)) in context.sentence_spans.iter().enumerate() {
            if rel >= s && rel < e {
                scores[si] += per_token[tok];
                any_token_in_context = true;
                break;
            }
        }
    }
    if !any_token_in_context {
        return Err(RationalizeError::ContextNotInPrompt);
    }
    // ties break toward the lowest sentence index
    let mut argmax = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[argmax] {
            argmax = i;
        }
    }
    Ok(RelevanceProfile {
        per_token: per_token.to_vec(),
        per_sentence: scores.into_iter().enumerate().collect(),
        argmax_sentence: argmax,
    })
}

/// Full attribution over a generation trace: per-step token relevance,
/// aggregation over steps, then per-sentence summation.
pub fn relevance_profile(
    trace: &GenerationTrace,
    context: &DecisionContext,
    context_offset: usize,
) -> Result<RelevanceProfile, RationalizeError> {
    if trace.answer_token_count == 0 {
        return Err(RationalizeError::EmptyAnswer);
    }
    let step_relevance: Vec<Vec<f64>> = trace
        .steps
        .iter()
        .map(|s| token_relevance(&s.attention, &s.gradient))
        .collect::<Result<_, _>>()?;
    let per_token = aggregate_relevance(&step_relevance, trace.prompt_token_count)?;
    sentence_relevance(&per_token, context, &trace.prompt_token_spans, context_offset)
}

/// Byte offset of the context text inside the answer prompt.
pub fn context_offset_in_prompt(prompt_text: &str, context_text: &str) -> Option<usize> {
    prompt_text.find(context_text)
}

pub struct MechanisticOutcome {
    pub rationale: Rationale,
    pub profile: Option<RelevanceProfile>,
}

/// Picks the mechanistic rationale for a candidate. A single-sentence
/// short-knowledge context is returned directly without tracing; otherwise
/// the answer prompt is traced and the argmax sentence extracted.
pub fn mechanistic_rationale(
    tracer: &Arc<dyn TraceBackend>,
    context: &DecisionContext,
    pairs: &[QAPair],
    question: &str,
    _candidate: &AnswerCandidate,
    params: &DecodeParams,
) -> Result<MechanisticOutcome, RationalizeError> {
    if context.kind == StrategyKind::ShortKnowledge {
        let sentence = context
            .sentence(0)
            .ok_or(RationalizeError::ContextNotInPrompt)?;
        return Ok(MechanisticOutcome {
            rationale: Rationale::mechanistic(sentence, 0),
            profile: None,
        });
    }
    let prompt = build_answer_prompt(&context.text, pairs, question)?;
    let prompt_text = match &prompt {
        crate::prompts::RenderedPrompt::Completion { text } => text.clone(),
        _ => unreachable!(),
    };
    let (_, trace) = tracer.generate_with_trace(&prompt, params)?;
    let offset = context_offset_in_prompt(&prompt_text, &context.text)
        .ok_or(RationalizeError::ContextNotInPrompt)?;
    let profile = relevance_profile(&trace, context, offset)?;
    let sentence = context
        .sentence(profile.argmax_sentence)
        .ok_or(RationalizeError::ContextNotInPrompt)?;
    Ok(MechanisticOutcome {
        rationale: Rationale::mechanistic(sentence, profile.argmax_sentence),
        profile: Some(profile),
    })
}

/// Replaces the attributed sentence with a seeded uniform random context
/// sentence (the random-rationale ablation).
pub fn random_mechanistic_rationale(
    context: &DecisionContext,
    seed: u64,
) -> Result<Rationale, RationalizeError> {
    if context.sentence_spans.is_empty() {
        return Err(RationalizeError::ContextNotInPrompt);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rng.gen_range(0..context.sentence_spans.len());
    Ok(Rationale::mechanistic(context.sentence(idx).unwrap(), idx))
}

pub struct AutomaticOutcome {
    pub rationale: Rationale,
    pub truncated: bool,
}

/// Asks the chat model to summarize the reasoning behind the candidate in one
/// sentence; longer replies are truncated to their first sentence.
pub fn automatic_rationale(
    chat: &Arc<dyn ChatBackend>,
    context: &DecisionContext,
    pairs: &[QAPair],
    question: &str,
    candidate: &AnswerCandidate,
    params: &DecodeParams,
) -> Result<AutomaticOutcome, RationalizeError> {
    let prompt = build_auto_rationale_prompt(&context.text, pairs, question, &candidate.answer)?;
    let reply = chat.chat(&prompt, params)?;
    let reply = reply.trim();
    if reply.is_empty() {
        return Err(RationalizeError::EmptyReply);
    }
    let spans = split_sentences(reply);
    let (text, truncated) = match spans.as_slice() {
        [] => return Err(RationalizeError::EmptyReply),
        [only] => (reply[only.0..only.1].to_string(), false),
        [first, ..] => (reply[first.0..first.1].to_string(), true),
    };
    Ok(AutomaticOutcome {
        rationale: Rationale::automatic(text),
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::backends::fakes::{ScriptedLm, ScriptedTraceLm};
    use crate::prompts::build_auto_rationale_prompt;
    use proptest::prelude::*;

    #[test]
    fn token_relevance_all_negative_gradients_zero() {
        let attn = vec![vec![0.3, 0.7]];
        let grads = vec![vec![-1.0, -0.5]];
        assert_eq!(token_relevance(&attn, &grads).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn token_relevance_single_head_hand_example() {
        let attn = vec![vec![0.5, 0.5]];
        let grads = vec![vec![1.0, -1.0]];
        assert_eq!(token_relevance(&attn, &grads).unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn token_relevance_two_head_hand_example() {
        let attn = vec![vec![0.5, 0.5], vec![0.25, 0.75]];
        let grads = vec![vec![1.0, -1.0], vec![2.0, 0.0]];
        assert_eq!(token_relevance(&attn, &grads).unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn token_relevance_shape_mismatch() {
        let attn = vec![vec![0.5, 0.5]];
        let grads = vec![vec![1.0]];
        assert!(matches!(
            token_relevance(&attn, &grads),
            Err(RationalizeError::ShapeMismatch)
        ));
    }

    #[test]
    fn aggregate_uniform_for_constant_input() {
        let r = aggregate_relevance(&[vec![3.0, 3.0, 3.0, 3.0]], 4).unwrap();
        for x in r {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_hand_softmax_example() {
        let r = aggregate_relevance(&[vec![0.0, 0.0], vec![2.0_f64.ln(), 0.0]], 2).unwrap();
        assert!((r[0] - 7.0 / 6.0).abs() < 1e-12);
        assert!((r[1] - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_empty_is_error() {
        assert!(matches!(
            aggregate_relevance(&[], 3),
            Err(RationalizeError::EmptySteps)
        ));
    }

    fn ctx_two_sentences() -> DecisionContext {
        // spans: "It rains." [0,9), "Roads are wet." [10,24)
        DecisionContext::new(StrategyKind::CaptionOnly, "It rains. Roads are wet.")
    }

    #[test]
    fn sentence_relevance_sums_per_sentence() {
        let ctx = ctx_two_sentences();
        // 4 tokens: two in sentence 0, two in sentence 1
        let spans = vec![(0, 2), (3, 8), (10, 15), (16, 23)];
        let r = vec![0.6, 0.2, 0.1, 0.1];
        let profile = sentence_relevance(&r, &ctx, &spans, 0).unwrap();
        assert!((profile.per_sentence[0].1 - 0.8).abs() < 1e-12);
        assert!((profile.per_sentence[1].1 - 0.2).abs() < 1e-12);
        assert_eq!(profile.argmax_sentence, 0);
    }

    #[test]
    fn sentence_relevance_single_sentence() {
        let ctx = DecisionContext::new(StrategyKind::ShortKnowledge, "Only one sentence here");
        let spans = vec![(0, 4), (5, 8)];
        let r = vec![0.3, 0.4];
        let profile = sentence_relevance(&r, &ctx, &spans, 0).unwrap();
        assert_eq!(profile.argmax_sentence, 0);
        assert!((profile.per_sentence[0].1 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn sentence_relevance_tie_breaks_low_index() {
        let ctx = ctx_two_sentences();
        let spans = vec![(0, 2), (10, 12)];
        let r = vec![0.5, 0.5];
        let profile = sentence_relevance(&r, &ctx, &spans, 0).unwrap();
        assert_eq!(profile.argmax_sentence, 0);
    }

    #[test]
    fn sentence_relevance_excludes_out_of_context_tokens() {
        let ctx = ctx_two_sentences();
        // context placed at offset 10 in the prompt; token at byte 0 is outside
        let spans = vec![(0, 3), (10, 12), (20, 22)];
        let r = vec![100.0, 0.4, 0.6];
        let profile = sentence_relevance(&r, &ctx, &spans, 10).unwrap();
        let total: f64 = profile.per_sentence.iter().map(|(_, s)| s).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(profile.argmax_sentence, 1);
    }

    #[test]
    fn short_knowledge_skips_tracing() {
        let tracer: Arc<dyn TraceBackend> =
            Arc::new(ScriptedTraceLm::new("t", HashMap::new()));
        let ctx = DecisionContext::new(StrategyKind::ShortKnowledge, "Rice is high in carbs.");
        let cand = AnswerCandidate {
            strategy: StrategyKind::ShortKnowledge,
            answer: "rice".into(),
            raw_output: "rice".into(),
        };
        let out = mechanistic_rationale(
            &tracer,
            &ctx,
            &[QAPair::new("q", "a")],
            "Q?",
            &cand,
            &DecodeParams::greedy(8),
        )
        .unwrap();
        assert_eq!(out.rationale.text, "Rice is high in carbs.");
        assert_eq!(out.rationale.extracted_sentence_index, Some(0));
        assert!(out.profile.is_none());
    }

    #[test]
    fn mechanistic_rationale_picks_focused_sentence() {
        let ctx = ctx_two_sentences();
        let pairs = vec![QAPair::new("q", "a")];
        let prompt = build_answer_prompt(&ctx.text, &pairs, "Why wet?").unwrap();
        let mut lm = ScriptedTraceLm::new("t", HashMap::new());
        lm.script(&prompt, "rain", Some("Roads are wet.".into()));
        let tracer: Arc<dyn TraceBackend> = Arc::new(lm);
        let cand = AnswerCandidate {
            strategy: StrategyKind::CaptionOnly,
            answer: "rain".into(),
            raw_output: "rain".into(),
        };
        let out = mechanistic_rationale(
            &tracer,
            &ctx,
            &pairs,
            "Why wet?",
            &cand,
            &DecodeParams::greedy(8),
        )
        .unwrap();
        assert_eq!(out.rationale.text, "Roads are wet.");
        assert_eq!(out.rationale.extracted_sentence_index, Some(1));
        assert!(out.profile.is_some());
    }

    #[test]
    fn mechanistic_text_is_substring_of_context() {
        let ctx = ctx_two_sentences();
        let r = random_mechanistic_rationale(&ctx, 42).unwrap();
        assert!(ctx.text.contains(&r.text));
    }

    #[test]
    fn random_mechanistic_is_seeded() {
        let ctx = ctx_two_sentences();
        let a = random_mechanistic_rationale(&ctx, 7).unwrap();
        let b = random_mechanistic_rationale(&ctx, 7).unwrap();
        assert_eq!(a, b);
    }

    fn scripted_chat(reply: &str, ctx: &DecisionContext, cand: &AnswerCandidate) -> Arc<dyn ChatBackend> {
        let pairs = vec![QAPair::new("q", "a")];
        let prompt =
            build_auto_rationale_prompt(&ctx.text, &pairs, "Q?", &cand.answer).unwrap();
        let mut lm = ScriptedLm::new("chat", HashMap::new());
        lm.script(&prompt, reply);
        Arc::new(lm)
    }

    #[test]
    fn automatic_rationale_passthrough() {
        let ctx = ctx_two_sentences();
        let cand = AnswerCandidate {
            strategy: StrategyKind::CaptionOnly,
            answer: "rain".into(),
            raw_output: "rain".into(),
        };
        let chat = scripted_chat("Because it rained.", &ctx, &cand);
        let out = automatic_rationale(
            &chat,
            &ctx,
            &[QAPair::new("q", "a")],
            "Q?",
            &cand,
            &DecodeParams::top_k_50(32, Some(1)),
        )
        .unwrap();
        assert_eq!(out.rationale.text, "Because it rained.");
        assert!(!out.truncated);
    }

    #[test]
    fn automatic_rationale_truncates_to_first_sentence() {
        let ctx = ctx_two_sentences();
        let cand = AnswerCandidate {
            strategy: StrategyKind::CaptionOnly,
            answer: "rain".into(),
            raw_output: "rain".into(),
        };
        let chat = scripted_chat("First reason. Second reason.", &ctx, &cand);
        let out = automatic_rationale(
            &chat,
            &ctx,
            &[QAPair::new("q", "a")],
            "Q?",
            &cand,
            &DecodeParams::top_k_50(32, Some(1)),
        )
        .unwrap();
        assert_eq!(out.rationale.text, "First reason.");
        assert!(out.truncated);
    }

    #[test]
    fn automatic_rationale_empty_reply_is_error() {
        let ctx = ctx_two_sentences();
        let cand = AnswerCandidate {
            strategy: StrategyKind::CaptionOnly,
            answer: "rain".into(),
            raw_output: "rain".into(),
        };
        let chat = scripted_chat("", &ctx, &cand);
        assert!(matches!(
            automatic_rationale(
                &chat,
                &ctx,
                &[QAPair::new("q", "a")],
                "Q?",
                &cand,
                &DecodeParams::top_k_50(32, Some(1)),
            ),
            Err(RationalizeError::EmptyReply)
        ));
    }

    proptest! {
        #[test]
        fn token_relevance_non_negative(
            attn in proptest::collection::vec(
                proptest::collection::vec(0.0..1.0f64, 6), 1..4),
            grads_seed in proptest::collection::vec(
                proptest::collection::vec(-2.0..2.0f64, 6), 1..4),
        ) {
            prop_assume!(attn.len() == grads_seed.len());
            let r = token_relevance(&attn, &grads_seed).unwrap();
            prop_assert!(r.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn aggregate_sums_to_step_count(
            steps in proptest::collection::vec(
                proptest::collection::vec(-3.0..3.0f64, 5..9), 1..6),
        ) {
            let n_p = 5;
            let r = aggregate_relevance(&steps, n_p).unwrap();
            let total: f64 = r.iter().sum();
            prop_assert!((total - steps.len() as f64).abs() < 1e-6);
        }

        #[test]
        fn argmax_invariant_under_positive_sentence_scaling(
            scores in proptest::collection::vec(0.0..10.0f64, 2..6),
            scale in 0.01..100.0f64,
        ) {
            let argmax = |xs: &[f64]| {
                let mut best = 0;
                for (i, &x) in xs.iter().enumerate() {
                    if x > xs[best] { best = i; }
                }
                best
            };
            let scaled: Vec<f64> = scores.iter().map(|&s| s * scale).collect();
            prop_assert_eq!(argmax(&scores), argmax(&scaled));
        }

        #[test]
        fn gradient_scaling_scales_token_relevance(
            attn_row in proptest::collection::vec(0.0..1.0f64, 4),
            grad_row in proptest::collection::vec(-1.0..1.0f64, 4),
            c in 0.1..10.0f64,
        ) {
            let base = token_relevance(&[attn_row.clone()], &[grad_row.clone()]).unwrap();
            let scaled_grads: Vec<f64> = grad_row.iter().map(|&g| g * c).collect();
            let scaled = token_relevance(&[attn_row], &[scaled_grads]).unwrap();
            for (b, s) in base.iter().zip(&scaled) {
                prop_assert!((b * c - s).abs() < 1e-9);
            }
        }
    }
}
