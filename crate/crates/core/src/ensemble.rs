//! Ensemble stage: an LLM selects the final answer from the three candidates
//! given their rationales, with a deterministic matching rule to attribute
//! the free-text output back to a candidate.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backends::{BackendError, CompletionBackend};
use crate::prompts::{build_fusion_prompt, FusionRationales, PromptError, RationalePair};
use crate::text::{normalize_answer, parse_answer};
use crate::types::{AnswerCandidate, DecodeParams, EnsembleDecision, QAPair, StrategyKind};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("all candidates absent")]
    AllAbsent,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Placeholder rendered into the fusion prompt for a failed strategy, keeping
/// the three-slot template intact.
pub const ABSENT_ANSWER: &str = "unknown";
pub const ABSENT_RATIONALE: &str = "no rationale available";

/// Fills gaps left by failed strategies so the fusion prompt always has three
/// candidates in fixed strategy order.
pub fn fill_absent_candidates(
    present: &[&AnswerCandidate],
) -> Result<Vec<AnswerCandidate>, EnsembleError> {
    if present.is_empty() {
        return Err(EnsembleError::AllAbsent);
    }
    Ok(StrategyKind::ALL
        .iter()
        .map(|&kind| {
            present
                .iter()
                .find(|c| c.strategy == kind)
                .map(|c| (*c).clone())
                .unwrap_or(AnswerCandidate {
                    strategy: kind,
                    answer: ABSENT_ANSWER.to_string(),
                    raw_output: String::new(),
                })
        })
        .collect())
}

/// Selects the final answer with the fusion LLM. The parsed output is matched
/// back to a candidate by normalized equality first, then by normalized
/// substring containment (earliest match in the output); if nothing matches,
/// the short-knowledge candidate is the fallback.
pub fn select_answer(
    base: &Arc<dyn CompletionBackend>,
    candidates: &[AnswerCandidate],
    rationales: &[RationalePair],
    pairs: &[QAPair],
    question: &str,
    mode: FusionRationales,
    params: &DecodeParams,
) -> Result<EnsembleDecision, EnsembleError> {
    let prompt = build_fusion_prompt(candidates, rationales, pairs, question, mode)?;
    let raw_output = base.complete(&prompt, params)?;
    let parsed = parse_answer(&raw_output);
    Ok(match_decision(candidates, &parsed, raw_output))
}

fn match_decision(
    candidates: &[AnswerCandidate],
    parsed: &str,
    raw_output: String,
) -> EnsembleDecision {
    let normalized_output = normalize_answer(parsed);

    // exact normalized equality
    for (i, c) in candidates.iter().enumerate() {
        if !normalized_output.is_empty() && normalize_answer(&c.answer) == normalized_output {
            return EnsembleDecision {
                final_answer: c.answer.clone(),
                chosen_index: Some(i),
                raw_output,
                fallback_used: false,
            };
        }
    }

    // normalized substring containment, earliest match position wins
    let mut best: Option<(usize, usize)> = None; // (position, candidate index)
    for (i, c) in candidates.iter().enumerate() {
        let needle = normalize_answer(&c.answer);
        if needle.is_empty() {
            continue;
        }
        if let Some(pos) = normalized_output.find(&needle) {
            if best.map_or(true, |(bp, _)| pos < bp) {
                best = Some((pos, i));
            }
        }
    }
    if let Some((_, i)) = best {
        return EnsembleDecision {
            final_answer: candidates[i].answer.clone(),
            chosen_index: Some(i),
            raw_output,
            fallback_used: false,
        };
    }

    // fallback: the short-knowledge candidate
    let fallback = candidates
        .iter()
        .find(|c| c.strategy == StrategyKind::ShortKnowledge)
        .or_else(|| candidates.first())
        .expect("three candidates present");
    EnsembleDecision {
        final_answer: fallback.answer.clone(),
        chosen_index: None,
        raw_output,
        fallback_used: true,
    }
}

/// Seeded uniform choice among present candidates (the random-selection
/// ablation baseline).
pub fn random_select(
    candidates: &[&AnswerCandidate],
    seed: u64,
) -> Result<EnsembleDecision, EnsembleError> {
    if candidates.is_empty() {
        return Err(EnsembleError::AllAbsent);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rng.gen_range(0..candidates.len());
    let chosen = candidates[idx];
    Ok(EnsembleDecision {
        final_answer: chosen.answer.clone(),
        chosen_index: Some(
            StrategyKind::ALL
                .iter()
                .position(|&k| k == chosen.strategy)
                .unwrap(),
        ),
        raw_output: String::new(),
        fallback_used: false,
    })
}
