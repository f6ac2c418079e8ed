//! Prompt construction for the four pipeline templates: answer generation,
//! background-knowledge generation, automatic-rationale generation, and
//! answer fusion. Builders are pure functions and the rendered bytes are
//! pinned by golden files under `templates/`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AnswerCandidate, QAPair, StrategyKind};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("QA pairs are required in every strategy prompt")]
    EmptyQaPairs,
    #[error("slot `{0}` must be non-empty")]
    EmptySlot(&'static str),
    #[error("fusion prompt needs exactly 3 candidates, got {0}")]
    WrongCandidateCount(usize),
    #[error("fusion candidates must be ordered caption_only, short_knowledge, long_knowledge")]
    WrongCandidateOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A prompt ready for a backend: either a flat completion string or a chat
/// message sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RenderedPrompt {
    Completion { text: String },
    Chat { messages: Vec<ChatMessage> },
}

impl RenderedPrompt {
    /// Canonical byte representation, used for cache keys, fake-backend
    /// lookup, and golden-file comparison. Chat prompts render as
    /// "User:"/"Assistant:" transcript lines.
    pub fn canonical_text(&self) -> String {
        match self {
            RenderedPrompt::Completion { text } => text.clone(),
            RenderedPrompt::Chat { messages } => {
                let lines: Vec<String> = messages
                    .iter()
                    .map(|m| match m.role {
                        Role::User => format!("User: {}", m.content),
                        Role::Assistant => format!("Assistant: {}", m.content),
                    })
                    .collect();
                lines.join("\n")
            }
        }
    }
}

/// Renders QA pairs as "Question:/Answer:" text lines for completion prompts.
pub fn render_qa_pairs(pairs: &[QAPair]) -> Result<String, PromptError> {
    if pairs.is_empty() {
        return Err(PromptError::EmptyQaPairs);
    }
    let blocks: Vec<String> = pairs
        .iter()
        .map(|p| format!("Question: {}\nAnswer: {}", p.question, p.answer))
        .collect();
    Ok(blocks.join("\n"))
}

fn qa_pair_turns(pairs: &[QAPair]) -> Result<Vec<ChatMessage>, PromptError> {
    if pairs.is_empty() {
        return Err(PromptError::EmptyQaPairs);
    }
    let mut turns = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        turns.push(ChatMessage::user(p.question.clone()));
        turns.push(ChatMessage::assistant(p.answer.clone()));
    }
    Ok(turns)
}

/// Answer-candidate prompt: instruction, the decision context, the QA-pair
/// demonstrations, and the question.
pub fn build_answer_prompt(
    context_text: &str,
    pairs: &[QAPair],
    question: &str,
) -> Result<RenderedPrompt, PromptError> {
    if context_text.is_empty() {
        return Err(PromptError::EmptySlot("context"));
    }
    let text = format!(
        "Please answer questions according to the given context.\nContext: {}\n{}\nQuestion: {}\nAnswer:",
        context_text,
        render_qa_pairs(pairs)?,
        question
    );
    Ok(RenderedPrompt::Completion { text })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeForm {
    Short,
    Long,
}

/// Background-knowledge prompt: the model is told it cannot answer from the
/// captions alone and is asked for related knowledge, with the single-sentence
/// length constraint present only in the short form.
pub fn build_knowledge_prompt(
    captions_block: &str,
    pairs: &[QAPair],
    question: &str,
    form: KnowledgeForm,
) -> Result<RenderedPrompt, PromptError> {
    if captions_block.is_empty() {
        return Err(PromptError::EmptySlot("captions_block"));
    }
    let mut messages = vec![
        ChatMessage::user(format!(
            "You are going to answer questions according to the context: {captions_block}"
        )),
        ChatMessage::assistant("Ok, please go ahead and ask your questions."),
    ];
    messages.extend(qa_pair_turns(pairs)?);
    messages.push(ChatMessage::user(question));
    messages.push(ChatMessage::assistant(
        "I don't have enough knowledge to answer this question.",
    ));
    messages.push(ChatMessage::user(match form {
        KnowledgeForm::Short => {
            "Please provide background knowledge related to this question in a single sentence."
        }
        KnowledgeForm::Long => "Please provide background knowledge related to this question.",
    }));
    Ok(RenderedPrompt::Chat { messages })
}

/// Automatic-rationale prompt: replays the QA exchange with the candidate
/// answer as the assistant's reply, then asks for the reasoning.
pub fn build_auto_rationale_prompt(
    context_text: &str,
    pairs: &[QAPair],
    question: &str,
    answer: &str,
) -> Result<RenderedPrompt, PromptError> {
    if context_text.is_empty() {
        return Err(PromptError::EmptySlot("context"));
    }
    if question.is_empty() {
        return Err(PromptError::EmptySlot("question"));
    }
    if answer.is_empty() {
        return Err(PromptError::EmptySlot("answer"));
    }
    let mut messages = vec![
        ChatMessage::user(format!(
            "You are going to answer questions according to the context: {context_text}"
        )),
        ChatMessage::assistant("Ok, please go ahead and ask your questions."),
    ];
    messages.extend(qa_pair_turns(pairs)?);
    messages.push(ChatMessage::user(question));
    messages.push(ChatMessage::assistant(answer));
    messages.push(ChatMessage::user(
        "Please explain the reasoning behind your answer in a single sentence.",
    ));
    Ok(RenderedPrompt::Chat { messages })
}

/// Which rationales appear in the fusion prompt. Ablation rows drop one or
/// both; `None` omits the "Rationales:" block entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRationales {
    None,
    MechanisticOnly,
    AutomaticOnly,
    Both,
}

/// One candidate's rationale texts as interpolated into the fusion prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RationalePair {
    pub automatic: String,
    pub mechanistic: String,
}

/// Fusion prompt: numbered rationale lines, the QA-pair demonstrations, and
/// the question with the three candidates joined by "or".
pub fn build_fusion_prompt(
    candidates: &[AnswerCandidate],
    rationales: &[RationalePair],
    pairs: &[QAPair],
    question: &str,
    mode: FusionRationales,
) -> Result<RenderedPrompt, PromptError> {
    if candidates.len() != 3 {
        return Err(PromptError::WrongCandidateCount(candidates.len()));
    }
    let expected = [
        StrategyKind::CaptionOnly,
        StrategyKind::ShortKnowledge,
        StrategyKind::LongKnowledge,
    ];
    if candidates
        .iter()
        .map(|c| c.strategy)
        .ne(expected.iter().copied())
    {
        return Err(PromptError::WrongCandidateOrder);
    }
    if mode != FusionRationales::None {
        if rationales.len() != 3 {
            return Err(PromptError::WrongCandidateCount(rationales.len()));
        }
        for r in rationales {
            match mode {
                FusionRationales::Both
                    if r.automatic.is_empty() || r.mechanistic.is_empty() =>
                {
                    return Err(PromptError::EmptySlot("rationale"))
                }
                FusionRationales::AutomaticOnly if r.automatic.is_empty() => {
                    return Err(PromptError::EmptySlot("rationale"))
                }
                FusionRationales::MechanisticOnly if r.mechanistic.is_empty() => {
                    return Err(PromptError::EmptySlot("rationale"))
                }
                _ => {}
            }
        }
    }

    let mut lines = vec!["Please answer the question based on the most reasonable rationale.".to_string()];
    if mode != FusionRationales::None {
        lines.push("Rationales:".to_string());
        for (i, r) in rationales.iter().enumerate() {
            let body = match mode {
                FusionRationales::Both => format!("{}. {}", r.automatic, r.mechanistic),
                FusionRationales::AutomaticOnly => r.automatic.clone(),
                FusionRationales::MechanisticOnly => r.mechanistic.clone(),
                FusionRationales::None => unreachable!(),
            };
            lines.push(format!("{}.{}", i + 1, body));
        }
    }
    lines.push(render_qa_pairs(pairs)?);
    lines.push(format!(
        "Question: {} {} or {} or {}?",
        question, candidates[0].answer, candidates[1].answer, candidates[2].answer
    ));
    lines.push("Answer:".to_string());
    Ok(RenderedPrompt::Completion {
        text: lines.join("\n"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs() -> Vec<QAPair> {
        vec![QAPair::new("q1", "a1"), QAPair::new("q2", "a2")]
    }

    #[test]
    fn render_qa_pairs_single() {
        assert_eq!(
            render_qa_pairs(&[QAPair::new("q1", "a1")]).unwrap(),
            "Question: q1\nAnswer: a1"
        );
    }

    #[test]
    fn render_qa_pairs_order() {
        assert_eq!(
            render_qa_pairs(&pairs()).unwrap(),
            "Question: q1\nAnswer: a1\nQuestion: q2\nAnswer: a2"
        );
    }

    #[test]
    fn render_qa_pairs_empty_is_error() {
        assert_eq!(render_qa_pairs(&[]), Err(PromptError::EmptyQaPairs));
    }

    #[test]
    fn answer_prompt_layout() {
        let p = build_answer_prompt("ctx", &[QAPair::new("q1", "a1")], "Q?").unwrap();
        assert_eq!(
            p.canonical_text(),
            "Please answer questions according to the given context.\nContext: ctx\nQuestion: q1\nAnswer: a1\nQuestion: Q?\nAnswer:"
        );
    }

    #[test]
    fn answer_prompt_deterministic() {
        let a = build_answer_prompt("ctx", &pairs(), "Q?").unwrap();
        let b = build_answer_prompt("ctx", &pairs(), "Q?").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn answer_prompt_preserves_internal_newlines() {
        let p = build_answer_prompt("line1\nline2", &pairs(), "Q?").unwrap();
        assert!(p.canonical_text().contains("Context: line1\nline2\n"));
    }

    #[test]
    fn knowledge_prompt_short_vs_long_suffix() {
        let short =
            build_knowledge_prompt("caps", &pairs(), "Q?", KnowledgeForm::Short).unwrap();
        let long = build_knowledge_prompt("caps", &pairs(), "Q?", KnowledgeForm::Long).unwrap();
        let last = |p: &RenderedPrompt| match p {
            RenderedPrompt::Chat { messages } => messages.last().unwrap().content.clone(),
            _ => unreachable!(),
        };
        assert!(last(&short).ends_with("in a single sentence."));
        assert_eq!(
            last(&long),
            "Please provide background knowledge related to this question."
        );
    }

    #[test]
    fn knowledge_prompt_empty_captions_is_error() {
        assert!(build_knowledge_prompt("", &pairs(), "Q?", KnowledgeForm::Short).is_err());
    }

    #[test]
    fn auto_rationale_turn_order() {
        let p = build_auto_rationale_prompt("ctx", &[QAPair::new("q1", "a1")], "Q?", "Brick")
            .unwrap();
        assert_eq!(
            p.canonical_text(),
            "User: You are going to answer questions according to the context: ctx\n\
             Assistant: Ok, please go ahead and ask your questions.\n\
             User: q1\n\
             Assistant: a1\n\
             User: Q?\n\
             Assistant: Brick\n\
             User: Please explain the reasoning behind your answer in a single sentence."
        );
    }

    #[test]
    fn auto_rationale_multi_sentence_answer_verbatim() {
        let p = build_auto_rationale_prompt("ctx", &pairs(), "Q?", "One. Two.").unwrap();
        assert!(p.canonical_text().contains("Assistant: One. Two.\n"));
    }

    fn three_candidates() -> Vec<AnswerCandidate> {
        vec![
            AnswerCandidate {
                strategy: StrategyKind::CaptionOnly,
                answer: "Brick".into(),
                raw_output: "Brick".into(),
            },
            AnswerCandidate {
                strategy: StrategyKind::ShortKnowledge,
                answer: "Concrete".into(),
                raw_output: "Concrete".into(),
            },
            AnswerCandidate {
                strategy: StrategyKind::LongKnowledge,
                answer: "Concrete".into(),
                raw_output: "Concrete".into(),
            },
        ]
    }

    fn three_rationales() -> Vec<RationalePair> {
        vec![
            RationalePair {
                automatic: "AR1".into(),
                mechanistic: "MR1".into(),
            },
            RationalePair {
                automatic: "AR2".into(),
                mechanistic: "MR2".into(),
            },
            RationalePair {
                automatic: "AR3".into(),
                mechanistic: "MR3".into(),
            },
        ]
    }

    #[test]
    fn fusion_prompt_layout() {
        let p = build_fusion_prompt(
            &three_candidates(),
            &three_rationales(),
            &[QAPair::new("q1", "a1")],
            "What is it?",
            FusionRationales::Both,
        )
        .unwrap();
        assert_eq!(
            p.canonical_text(),
            "Please answer the question based on the most reasonable rationale.\n\
             Rationales:\n\
             1.AR1. MR1\n\
             2.AR2. MR2\n\
             3.AR3. MR3\n\
             Question: q1\nAnswer: a1\n\
             Question: What is it? Brick or Concrete or Concrete?\n\
             Answer:"
        );
    }

    #[test]
    fn fusion_prompt_duplicates_kept() {
        let p = build_fusion_prompt(
            &three_candidates(),
            &three_rationales(),
            &pairs(),
            "Q?",
            FusionRationales::Both,
        )
        .unwrap();
        assert!(p
            .canonical_text()
            .contains("Q? Brick or Concrete or Concrete?"));
    }

    #[test]
    fn fusion_prompt_wrong_count_is_error() {
        let mut cands = three_candidates();
        cands.pop();
        let err = build_fusion_prompt(
            &cands,
            &three_rationales(),
            &pairs(),
            "Q?",
            FusionRationales::Both,
        )
        .unwrap_err();
        assert_eq!(err, PromptError::WrongCandidateCount(2));
    }

    #[test]
    fn fusion_prompt_without_rationales_omits_block() {
        let p = build_fusion_prompt(
            &three_candidates(),
            &[],
            &[QAPair::new("q1", "a1")],
            "Q?",
            FusionRationales::None,
        )
        .unwrap();
        let text = p.canonical_text();
        assert!(!text.contains("Rationales:"));
        assert!(text.starts_with(
            "Please answer the question based on the most reasonable rationale.\nQuestion: q1"
        ));
    }
}
