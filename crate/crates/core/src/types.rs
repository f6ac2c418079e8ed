//! Domain types shared across the pipeline stages.

use serde::{Deserialize, Serialize};

use crate::text::split_sentences;

/// Which dataset a question comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Okvqa,
    AokvqaVal,
    AokvqaTest,
}

impl Dataset {
    /// Official question count of the split.
    pub fn expected_count(self) -> usize {
        match self {
            Dataset::Okvqa => 5046,
            Dataset::AokvqaVal => 1100,
            Dataset::AokvqaTest => 6700,
        }
    }
}

/// One dataset item. `annotations` holds the 10 gold answers, or is empty for
/// unlabeled test items.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VQAQuestion {
    pub question_id: String,
    pub image_ref: String,
    pub question_text: String,
    pub annotations: Vec<String>,
    pub dataset: Dataset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
}

impl Caption {
    pub fn new(text: impl Into<String>) -> Self {
        Caption { text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
}

impl QAPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        QAPair {
            question: question.into(),
            answer: answer.into(),
        }
    }
}

/// The three question-answering strategies, in their fixed pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    CaptionOnly,
    ShortKnowledge,
    LongKnowledge,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::CaptionOnly,
        StrategyKind::ShortKnowledge,
        StrategyKind::LongKnowledge,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::CaptionOnly => "caption_only",
            StrategyKind::ShortKnowledge => "short_knowledge",
            StrategyKind::LongKnowledge => "long_knowledge",
        }
    }
}

/// One strategy's textual evidence, with its sentence boundaries.
///
/// `sentence_spans` are byte spans into `text`; they are disjoint, ordered,
/// and cover every non-whitespace byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    pub kind: StrategyKind,
    pub text: String,
    pub sentence_spans: Vec<(usize, usize)>,
}

impl DecisionContext {
    /// Builds a context, computing sentence spans from `text`.
    pub fn new(kind: StrategyKind, text: impl Into<String>) -> Self {
        let text = text.into();
        let sentence_spans = split_sentences(&text);
        DecisionContext {
            kind,
            text,
            sentence_spans,
        }
    }

    pub fn sentence(&self, index: usize) -> Option<&str> {
        self.sentence_spans
            .get(index)
            .map(|&(s, e)| &self.text[s..e])
    }
}

/// One strategy's parsed answer plus the raw model output it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    pub strategy: StrategyKind,
    pub answer: String,
    pub raw_output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleKind {
    Automatic,
    Mechanistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleSource {
    Generated,
    Extracted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub kind: RationaleKind,
    pub text: String,
    pub source: RationaleSource,
    pub extracted_sentence_index: Option<usize>,
}

impl Rationale {
    pub fn automatic(text: impl Into<String>) -> Self {
        Rationale {
            kind: RationaleKind::Automatic,
            text: text.into(),
            source: RationaleSource::Generated,
            extracted_sentence_index: None,
        }
    }

    pub fn mechanistic(text: impl Into<String>, sentence_index: usize) -> Self {
        Rationale {
            kind: RationaleKind::Mechanistic,
            text: text.into(),
            source: RationaleSource::Extracted,
            extracted_sentence_index: Some(sentence_index),
        }
    }
}

/// Final answer selected by the ensemble stage.
///
/// `chosen_index` is set iff `final_answer` matched one of the three
/// candidates under normalized comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub final_answer: String,
    pub chosen_index: Option<usize>,
    pub raw_output: String,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    TopK,
}

/// Decoding parameters handed to every backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub k: u32,
    pub temperature: f64,
    pub length_penalty: f64,
    pub repetition_penalty: f64,
    pub diversity_penalty: f64,
    pub max_new_tokens: u32,
    pub seed: Option<u64>,
}

impl DecodeParams {
    /// Greedy decoding, the setting used for answer generation and tracing.
    pub fn greedy(max_new_tokens: u32) -> Self {
        DecodeParams {
            mode: DecodeMode::Greedy,
            k: 0,
            temperature: 1.0,
            length_penalty: 1.0,
            repetition_penalty: 1.0,
            diversity_penalty: 0.0,
            max_new_tokens,
            seed: None,
        }
    }

    /// Top-k sampling with k=50, the setting used for the instruction-tuned
    /// model (knowledge and automatic-rationale generation).
    pub fn top_k_50(max_new_tokens: u32, seed: Option<u64>) -> Self {
        DecodeParams {
            mode: DecodeMode::TopK,
            k: 50,
            temperature: 1.0,
            length_penalty: 1.0,
            repetition_penalty: 1.0,
            diversity_penalty: 0.0,
            max_new_tokens,
            seed,
        }
    }
}
