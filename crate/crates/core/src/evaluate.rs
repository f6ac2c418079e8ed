//! Dataset loading, soft-accuracy VQA scoring, ablation configuration, and
//! the overlap / rationale-hit analyses.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_answer;
use crate::types::{Dataset, StrategyKind, VQAQuestion};

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed records for question ids: {0:?}")]
    MalformedRecords(Vec<String>),
    #[error("{dataset:?} split should have {expected} questions, found {found}")]
    WrongQuestionCount {
        dataset: Dataset,
        expected: usize,
        found: usize,
    },
    #[error("expected exactly 10 annotations, got {0}")]
    WrongAnnotationCount(usize),
    #[error("reports cover different question sets")]
    MismatchedQuestionSets,
    #[error("invalid ablation config: {0}")]
    InvalidConfig(String),
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct OkvqaQuestionsFile {
    questions: Vec<OkvqaQuestionEntry>,
}

#[derive(Deserialize)]
struct OkvqaQuestionEntry {
    question_id: serde_json::Value,
    image_id: serde_json::Value,
    question: String,
}

#[derive(Deserialize)]
struct OkvqaAnnotationsFile {
    annotations: Vec<OkvqaAnnotationEntry>,
}

#[derive(Deserialize)]
struct OkvqaAnnotationEntry {
    question_id: serde_json::Value,
    answers: Vec<OkvqaAnswer>,
}

#[derive(Deserialize)]
struct OkvqaAnswer {
    answer: String,
}

#[derive(Deserialize)]
struct AokvqaEntry {
    question_id: serde_json::Value,
    image_id: serde_json::Value,
    question: String,
    #[serde(default)]
    direct_answers: Option<Vec<String>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, EvaluateError> {
    let raw = std::fs::read_to_string(path).map_err(|source| EvaluateError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|source| EvaluateError::Parse {
        path: path.display().to_string(),
        source,
    })
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Loads OK-VQA from its paired questions/annotations files. Every question
/// must carry exactly 10 answers; with `allow_partial` the official count
/// check is skipped (fixture subsets).
pub fn load_okvqa(
    questions_path: &Path,
    annotations_path: &Path,
    allow_partial: bool,
) -> Result<Vec<VQAQuestion>, EvaluateError> {
    let questions: OkvqaQuestionsFile = read_json(questions_path)?;
    let annotations: OkvqaAnnotationsFile = read_json(annotations_path)?;
    let by_id: HashMap<String, &OkvqaAnnotationEntry> = annotations
        .annotations
        .iter()
        .map(|a| (id_string(&a.question_id), a))
        .collect();

    let mut malformed = Vec::new();
    let mut out = Vec::with_capacity(questions.questions.len());
    for q in &questions.questions {
        let qid = id_string(&q.question_id);
        let Some(ann) = by_id.get(&qid) else {
            malformed.push(qid);
            continue;
        };
        if ann.answers.len() != 10 || q.question.trim().is_empty() {
            malformed.push(qid);
            continue;
        }
        out.push(VQAQuestion {
            question_id: qid,
            image_ref: id_string(&q.image_id),
            question_text: q.question.clone(),
            annotations: ann.answers.iter().map(|a| a.answer.clone()).collect(),
            dataset: Dataset::Okvqa,
        });
    }
    if !malformed.is_empty() {
        return Err(EvaluateError::MalformedRecords(malformed));
    }
    check_count(Dataset::Okvqa, out.len(), allow_partial)?;
    Ok(out)
}

/// Loads an A-OKVQA split from its single record file. Validation items carry
/// 10 direct answers; test items load with empty annotations.
pub fn load_aokvqa(
    records_path: &Path,
    dataset: Dataset,
    allow_partial: bool,
) -> Result<Vec<VQAQuestion>, EvaluateError> {
    let entries: Vec<AokvqaEntry> = read_json(records_path)?;
    let mut malformed = Vec::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let qid = id_string(&e.question_id);
        let annotations = match (&e.direct_answers, dataset) {
            (Some(answers), _) if answers.len() == 10 => answers.clone(),
            (None, Dataset::AokvqaTest) => Vec::new(),
            _ => {
                malformed.push(qid);
                continue;
            }
        };
        if e.question.trim().is_empty() {
            malformed.push(qid);
            continue;
        }
        out.push(VQAQuestion {
            question_id: qid,
            image_ref: id_string(&e.image_id),
            question_text: e.question.clone(),
            annotations,
            dataset,
        });
    }
    if !malformed.is_empty() {
        return Err(EvaluateError::MalformedRecords(malformed));
    }
    check_count(dataset, out.len(), allow_partial)?;
    Ok(out)
}

fn check_count(dataset: Dataset, found: usize, allow_partial: bool) -> Result<(), EvaluateError> {
    let expected = dataset.expected_count();
    if !allow_partial && found != expected {
        return Err(EvaluateError::WrongQuestionCount {
            dataset,
            expected,
            found,
        });
    }
    Ok(())
}

/// Seeded uniform subset of `limit` questions, kept in dataset order. With
/// `limit >= len` the full set is returned unchanged.
pub fn sample_questions(questions: &[VQAQuestion], limit: usize, seed: u64) -> Vec<VQAQuestion> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if limit >= questions.len() {
        return questions.to_vec();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..questions.len()).collect();
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(limit).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| questions[i].clone()).collect()
}

// ---------------------------------------------------------------------------
// VQA soft accuracy
// ---------------------------------------------------------------------------

/// Official VQA soft accuracy: over the 10 leave-one-out 9-annotation
/// subsets, average `min(matches_in_subset / 3, 1)`. Prediction and
/// annotations are compared after normalization.
pub fn vqa_score(prediction: &str, annotations: &[String]) -> Result<f64, EvaluateError> {
    if annotations.len() != 10 {
        return Err(EvaluateError::WrongAnnotationCount(annotations.len()));
    }
    let pred = normalize_answer(prediction);
    let matches: Vec<bool> = annotations
        .iter()
        .map(|a| !pred.is_empty() && normalize_answer(a) == pred)
        .collect();
    let total = matches.iter().filter(|&&m| m).count();
    let mut acc = 0.0;
    for left_out in &matches {
        let in_subset = total - usize::from(*left_out);
        acc += (in_subset as f64 / 3.0).min(1.0);
    }
    Ok(acc / 10.0)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Per-strategy details carried in a question record, enough to reconstruct
/// the hit-rate analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub strategy: StrategyKind,
    pub answer: Option<String>,
    pub automatic_rationale: Option<String>,
    pub mechanistic_rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub final_answer: String,
    pub score: Option<f64>,
    pub chosen_strategy: Option<StrategyKind>,
    pub fallback_used: bool,
    pub candidates: Vec<CandidateRecord>,
    /// Set when the question could not be answered at all.
    #[serde(default)]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub dataset: Dataset,
    pub n_questions: usize,
    pub mean_vqa_score: f64,
    pub config_fingerprint: String,
    pub records: Vec<QuestionRecord>,
}

impl ScoreReport {
    pub fn from_records(
        dataset: Dataset,
        config_fingerprint: String,
        records: Vec<QuestionRecord>,
    ) -> Self {
        let scored: Vec<f64> = records.iter().filter_map(|r| r.score).collect();
        let mean = if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        ScoreReport {
            dataset,
            n_questions: records.len(),
            mean_vqa_score: mean,
            config_fingerprint,
            records,
        }
    }
}

// ---------------------------------------------------------------------------
// Ablation configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleMode {
    None,
    MrOnly,
    ArOnly,
    ArPlusRandomMr,
    ArPlusMr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Llm,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub strategies: Vec<StrategyKind>,
    pub rationale_mode: RationaleMode,
    pub selection: SelectionMode,
    pub seed: u64,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<(), EvaluateError> {
        if self.strategies.is_empty() {
            return Err(EvaluateError::InvalidConfig("no strategies enabled".into()));
        }
        if self.selection == SelectionMode::Random && self.rationale_mode != RationaleMode::None {
            return Err(EvaluateError::InvalidConfig(
                "random selection forbids rationale modes other than none".into(),
            ));
        }
        Ok(())
    }

    /// Stable description of the configuration recorded into reports.
    pub fn fingerprint(&self) -> String {
        let strategies: Vec<&str> = StrategyKind::ALL
            .iter()
            .filter(|k| self.strategies.contains(k))
            .map(|k| k.label())
            .collect();
        format!(
            "strategies={};rationales={:?};selection={:?};seed={}",
            strategies.join("+"),
            self.rationale_mode,
            self.selection,
            self.seed
        )
    }

    /// Row N (1-based) of the strategy-diversification ablation table.
    pub fn diversification_row(row: usize, seed: u64) -> Result<Self, EvaluateError> {
        use StrategyKind::*;
        let strategies = match row {
            1 => vec![CaptionOnly],
            2 => vec![ShortKnowledge],
            3 => vec![LongKnowledge],
            4 => vec![CaptionOnly, ShortKnowledge],
            5 => vec![CaptionOnly, LongKnowledge],
            6 => vec![CaptionOnly, ShortKnowledge, LongKnowledge],
            _ => {
                return Err(EvaluateError::InvalidConfig(format!(
                    "diversification table has rows 1-6, got {row}"
                )))
            }
        };
        Ok(AblationConfig {
            strategies,
            rationale_mode: RationaleMode::ArPlusMr,
            selection: SelectionMode::Llm,
            seed,
        })
    }

    /// Row N (1-based) of the rationalization ablation table; all rows use
    /// the full strategy set.
    pub fn rationalization_row(row: usize, seed: u64) -> Result<Self, EvaluateError> {
        let (rationale_mode, selection) = match row {
            1 => (RationaleMode::None, SelectionMode::Random),
            2 => (RationaleMode::None, SelectionMode::Llm),
            3 => (RationaleMode::MrOnly, SelectionMode::Llm),
            4 => (RationaleMode::ArOnly, SelectionMode::Llm),
            5 => (RationaleMode::ArPlusRandomMr, SelectionMode::Llm),
            6 => (RationaleMode::ArPlusMr, SelectionMode::Llm),
            _ => {
                return Err(EvaluateError::InvalidConfig(format!(
                    "rationalization table has rows 1-6, got {row}"
                )))
            }
        };
        Ok(AblationConfig {
            strategies: StrategyKind::ALL.to_vec(),
            rationale_mode,
            selection,
            seed,
        })
    }
}

// ---------------------------------------------------------------------------
// Analyses
// ---------------------------------------------------------------------------

/// For each ordered strategy pair (i, j): among questions strategy i answers
/// successfully (score above `threshold`), the fraction strategy j also
/// answers successfully. Reports must cover identical question sets and are
/// expected in the fixed strategy order.
pub fn strategy_overlap(
    reports: &[ScoreReport; 3],
    threshold: f64,
) -> Result<[[f64; 3]; 3], EvaluateError> {
    let ids: Vec<Vec<&str>> = reports
        .iter()
        .map(|r| r.records.iter().map(|q| q.question_id.as_str()).collect())
        .collect();
    if ids[0] != ids[1] || ids[0] != ids[2] {
        return Err(EvaluateError::MismatchedQuestionSets);
    }
    let success: Vec<Vec<bool>> = reports
        .iter()
        .map(|r| {
            r.records
                .iter()
                .map(|q| q.score.unwrap_or(0.0) > threshold)
                .collect()
        })
        .collect();
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let base: Vec<usize> = (0..ids[0].len()).filter(|&q| success[i][q]).collect();
            if base.is_empty() {
                out[i][j] = 0.0;
                continue;
            }
            let both = base.iter().filter(|&&q| success[j][q]).count();
            out[i][j] = both as f64 / base.len() as f64;
        }
    }
    Ok(out)
}

/// Selection probabilities of one strategy's candidate, conditioned on its
/// answer occurring (normalized substring) in the automatic rationale, the
/// mechanistic rationale, either, and the three negations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateRow {
    pub strategy: StrategyKind,
    pub p_selected_given_ar_hit: Option<f64>,
    pub p_selected_given_ar_miss: Option<f64>,
    pub p_selected_given_mr_hit: Option<f64>,
    pub p_selected_given_mr_miss: Option<f64>,
    pub p_selected_given_either_hit: Option<f64>,
    pub p_selected_given_neither_hit: Option<f64>,
}

impl HitRateRow {
    /// Differential reported in the analysis: P(sel|either) − P(sel|neither).
    pub fn differential(&self) -> Option<f64> {
        Some(self.p_selected_given_either_hit? - self.p_selected_given_neither_hit?)
    }
}

fn is_hit(candidate: &str, rationale: Option<&str>) -> bool {
    let needle = normalize_answer(candidate);
    if needle.is_empty() {
        return false;
    }
    rationale
        .map(|r| normalize_answer(r).contains(&needle))
        .unwrap_or(false)
}

/// Computes the hit-rate table over question records.
pub fn rationale_hit_rate(records: &[QuestionRecord]) -> Vec<HitRateRow> {
    StrategyKind::ALL
        .iter()
        .enumerate()
        .map(|(idx, &strategy)| {
            // (selected, count) tallies for the six conditions
            let mut tallies = [[0usize; 2]; 6];
            for rec in records {
                let Some(cand) = rec.candidates.iter().find(|c| c.strategy == strategy) else {
                    continue;
                };
                let Some(answer) = cand.answer.as_deref() else {
                    continue;
                };
                let selected = rec
                    .chosen_strategy
                    .map(|s| s == StrategyKind::ALL[idx])
                    .unwrap_or(false);
                let ar_hit = is_hit(answer, cand.automatic_rationale.as_deref());
                let mr_hit = is_hit(answer, cand.mechanistic_rationale.as_deref());
                let conds = [
                    ar_hit,
                    !ar_hit,
                    mr_hit,
                    !mr_hit,
                    ar_hit || mr_hit,
                    !(ar_hit || mr_hit),
                ];
                for (t, &c) in tallies.iter_mut().zip(&conds) {
                    if c {
                        t[1] += 1;
                        if selected {
                            t[0] += 1;
                        }
                    }
                }
            }
            let p = |t: [usize; 2]| (t[1] > 0).then(|| t[0] as f64 / t[1] as f64);
            HitRateRow {
                strategy,
                p_selected_given_ar_hit: p(tallies[0]),
                p_selected_given_ar_miss: p(tallies[1]),
                p_selected_given_mr_hit: p(tallies[2]),
                p_selected_given_mr_miss: p(tallies[3]),
                p_selected_given_either_hit: p(tallies[4]),
                p_selected_given_neither_hit: p(tallies[5]),
            }
        })
        .collect()
}
