//! Per-question orchestration: diversify, rationalize, select, score. Runs
//! are deterministic regardless of worker count because every random choice
//! is seeded from the run seed and the question id, never from scheduling.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::cached::{CachedCaptioner, CachedChat, CachedCompletion, CachedQaGen};
use crate::backends::{
    Captioner, ChatBackend, CompletionBackend, QaPairGenerator, TraceBackend,
};
use crate::diversify::{diversification, Diversified, DiversifyBackends, DiversifyConfig};
use crate::ensemble::{
    fill_absent_candidates, random_select, select_answer, EnsembleError, ABSENT_RATIONALE,
};
use crate::evaluate::{
    vqa_score, AblationConfig, CandidateRecord, EvaluateError, QuestionRecord, RationaleMode,
    ScoreReport, SelectionMode,
};
use crate::prompts::{FusionRationales, RationalePair};
use crate::rationalize::{
    automatic_rationale, mechanistic_rationale, random_mechanistic_rationale, RationalizeError,
    RelevanceProfile,
};
use crate::store::{cache_key, CacheStore, RecordWriter, StoreError};
use crate::types::{
    AnswerCandidate, DecodeParams, EnsembleDecision, Rationale, StrategyKind, VQAQuestion,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("worker thread panicked")]
    WorkerPanic,
}

/// Everything the pipeline calls out to. The tracer is usually the same
/// underlying model as `base`, exposed through its tracing interface.
#[derive(Clone)]
pub struct PipelineBackends {
    pub captioner: Arc<dyn Captioner>,
    pub qa_gen: Arc<dyn QaPairGenerator>,
    pub chat: Arc<dyn ChatBackend>,
    pub base: Arc<dyn CompletionBackend>,
    pub tracer: Arc<dyn TraceBackend>,
}

impl PipelineBackends {
    /// Wraps every backend in a cache layer over `store`. Mechanistic
    /// attributions are cached separately (see [`run_question`]) because they
    /// carry a trace-derived payload, not a plain completion.
    pub fn with_cache(self, store: &CacheStore) -> PipelineBackends {
        PipelineBackends {
            captioner: Arc::new(CachedCaptioner::new(self.captioner, store.clone())),
            qa_gen: Arc::new(CachedQaGen::new(self.qa_gen, store.clone())),
            chat: Arc::new(CachedChat::new(self.chat, store.clone())),
            base: Arc::new(CachedCompletion::new(self.base, store.clone())),
            tracer: self.tracer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub ablation: AblationConfig,
    pub captions_per_image: usize,
    pub qa_pairs_per_image: usize,
    /// Sampling decode for the instruction-tuned model (knowledge, automatic
    /// rationales).
    pub chat_params: DecodeParams,
    /// Greedy decode for candidate answers, traced answers, and fusion.
    pub base_params: DecodeParams,
    pub workers: usize,
}

impl PipelineConfig {
    pub fn new(ablation: AblationConfig) -> Self {
        PipelineConfig {
            ablation,
            captions_per_image: 30,
            qa_pairs_per_image: 30,
            chat_params: DecodeParams::top_k_50(128, Some(0)),
            base_params: DecodeParams::greedy(16),
            workers: 4,
        }
    }

    fn diversify_config(&self, question_seed: u64) -> DiversifyConfig {
        let mut chat_params = self.chat_params.clone();
        // sampling seed is tied to the question, not to the run schedule
        chat_params.seed = Some(question_seed);
        DiversifyConfig {
            strategies: self.ablation.strategies.clone(),
            captions_per_image: self.captions_per_image,
            qa_pairs_per_image: self.qa_pairs_per_image,
            chat_params,
            base_params: self.base_params.clone(),
        }
    }
}

/// Question-specific seed: run seed folded with a hash of the question id,
/// so a question's random choices do not depend on batch order.
pub fn question_seed(run_seed: u64, question_id: &str) -> u64 {
    let digest = Sha256::digest(question_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    run_seed ^ u64::from_le_bytes(bytes)
}

/// Full per-question artifact set, kept for the JSONL record stream and for
/// `inspect`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionArtifacts {
    pub question_id: String,
    pub diversified: Option<Diversified>,
    pub rationales: Vec<StrategyRationales>,
    pub decision: Option<EnsembleDecision>,
    pub record: QuestionRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyRationales {
    pub strategy: StrategyKind,
    pub automatic: Option<Rationale>,
    pub mechanistic: Option<Rationale>,
    pub relevance: Option<RelevanceProfile>,
}

/// Cached payload of one mechanistic attribution.
#[derive(Serialize, Deserialize)]
struct MechCachePayload {
    rationale: Rationale,
    profile: Option<RelevanceProfile>,
}

fn failed_record(question: &VQAQuestion, failure: String) -> QuestionRecord {
    QuestionRecord {
        question_id: question.question_id.clone(),
        final_answer: String::new(),
        score: (!question.annotations.is_empty()).then_some(0.0),
        chosen_strategy: None,
        fallback_used: false,
        candidates: Vec::new(),
        failure: Some(failure),
    }
}

fn score_answer(question: &VQAQuestion, answer: &str) -> Option<f64> {
    if question.annotations.is_empty() {
        return None;
    }
    vqa_score(answer, &question.annotations).ok()
}

fn rationales_for(
    question: &VQAQuestion,
    diversified: &Diversified,
    backends: &PipelineBackends,
    config: &PipelineConfig,
    mech_store: Option<&CacheStore>,
    qseed: u64,
) -> Vec<StrategyRationales> {
    let mode = config.ablation.rationale_mode;
    let want_ar = matches!(
        mode,
        RationaleMode::ArOnly | RationaleMode::ArPlusRandomMr | RationaleMode::ArPlusMr
    );
    let want_mr = matches!(mode, RationaleMode::MrOnly | RationaleMode::ArPlusMr);
    let want_random_mr = mode == RationaleMode::ArPlusRandomMr;

    let mut chat_params = config.chat_params.clone();
    chat_params.seed = Some(qseed.wrapping_add(1));

    let mut out = Vec::new();
    for outcome in &diversified.outcomes {
        let (Some(context), Some(candidate)) = (&outcome.context, &outcome.candidate) else {
            continue;
        };
        let automatic = want_ar
            .then(|| {
                automatic_rationale(
                    &backends.chat,
                    context,
                    &diversified.pairs,
                    &question.question_text,
                    candidate,
                    &chat_params,
                )
                .ok()
                .map(|o| o.rationale)
            })
            .flatten();
        let strategy_pos = StrategyKind::ALL
            .iter()
            .position(|&k| k == outcome.kind)
            .unwrap() as u64;
        let (mechanistic, relevance) = if want_mr {
            match cached_mechanistic(
                backends,
                config,
                mech_store,
                context,
                diversified,
                question,
                candidate,
            ) {
                Ok((r, p)) => (Some(r), p),
                Err(_) => (None, None),
            }
        } else if want_random_mr {
            (
                random_mechanistic_rationale(context, qseed.wrapping_add(strategy_pos)).ok(),
                None,
            )
        } else {
            (None, None)
        };
        out.push(StrategyRationales {
            strategy: outcome.kind,
            automatic,
            mechanistic,
            relevance,
        });
    }
    out
}

fn cached_mechanistic(
    backends: &PipelineBackends,
    config: &PipelineConfig,
    mech_store: Option<&CacheStore>,
    context: &crate::types::DecisionContext,
    diversified: &Diversified,
    question: &VQAQuestion,
    candidate: &AnswerCandidate,
) -> Result<(Rationale, Option<RelevanceProfile>), RationalizeError> {
    let key = mech_store.map(|_| {
        let payload = format!(
            "mech\x1f{}\x1f{}\x1f{}",
            context.text, question.question_text, question.question_id
        );
        cache_key(
            crate::backends::TraceBackend::model_id(backends.tracer.as_ref()),
            &config.base_params,
            payload.as_bytes(),
        )
    });
    if let (Some(store), Some(key)) = (mech_store, &key) {
        match store.get::<MechCachePayload>(key) {
            Ok(Some(hit)) => return Ok((hit.rationale, hit.profile)),
            Ok(None) => {}
            Err(e) => eprintln!("mech cache get failed for {key}: {e}"),
        }
    }
    let outcome = mechanistic_rationale(
        &backends.tracer,
        context,
        &diversified.pairs,
        &question.question_text,
        candidate,
        &config.base_params,
    )?;
    if let (Some(store), Some(key)) = (mech_store, &key) {
        let _ = store.put(
            key,
            &MechCachePayload {
                rationale: outcome.rationale.clone(),
                profile: outcome.profile.clone(),
            },
        );
    }
    Ok((outcome.rationale, outcome.profile))
}

fn fusion_mode(mode: RationaleMode) -> FusionRationales {
    match mode {
        RationaleMode::None => FusionRationales::None,
        RationaleMode::MrOnly => FusionRationales::MechanisticOnly,
        RationaleMode::ArOnly => FusionRationales::AutomaticOnly,
        RationaleMode::ArPlusRandomMr | RationaleMode::ArPlusMr => FusionRationales::Both,
    }
}

fn rationale_pairs(rationales: &[StrategyRationales]) -> Vec<RationalePair> {
    StrategyKind::ALL
        .iter()
        .map(|&kind| {
            let r = rationales.iter().find(|r| r.strategy == kind);
            let text = |o: Option<&Rationale>| {
                o.map(|r| r.text.clone())
                    .unwrap_or_else(|| ABSENT_RATIONALE.to_string())
            };
            RationalePair {
                automatic: text(r.and_then(|r| r.automatic.as_ref())),
                mechanistic: text(r.and_then(|r| r.mechanistic.as_ref())),
            }
        })
        .collect()
}

fn candidate_records(
    diversified: &Diversified,
    rationales: &[StrategyRationales],
) -> Vec<CandidateRecord> {
    diversified
        .outcomes
        .iter()
        .map(|o| {
            let r = rationales.iter().find(|r| r.strategy == o.kind);
            CandidateRecord {
                strategy: o.kind,
                answer: o.candidate.as_ref().map(|c| c.answer.clone()),
                automatic_rationale: r
                    .and_then(|r| r.automatic.as_ref())
                    .map(|x| x.text.clone()),
                mechanistic_rationale: r
                    .and_then(|r| r.mechanistic.as_ref())
                    .map(|x| x.text.clone()),
            }
        })
        .collect()
}

/// Runs one question end to end. Strategy failures degrade to whatever
/// candidates remain; only a total failure (no candidates at all) yields an
/// unanswered record.
pub fn run_question(
    question: &VQAQuestion,
    backends: &PipelineBackends,
    config: &PipelineConfig,
    mech_store: Option<&CacheStore>,
) -> QuestionArtifacts {
    let qseed = question_seed(config.ablation.seed, &question.question_id);
    let div_backends = DiversifyBackends {
        captioner: backends.captioner.clone(),
        qa_gen: backends.qa_gen.clone(),
        chat: backends.chat.clone(),
        base: backends.base.clone(),
    };
    let diversified = match diversification(
        &question.image_ref,
        &question.question_text,
        &div_backends,
        &config.diversify_config(qseed),
    ) {
        Ok(d) => d,
        Err(e) => {
            return QuestionArtifacts {
                question_id: question.question_id.clone(),
                diversified: None,
                rationales: Vec::new(),
                decision: None,
                record: failed_record(question, e.to_string()),
            }
        }
    };

    let present = diversified.present_candidates();
    if present.is_empty() {
        let mut record = failed_record(question, "all strategies failed".to_string());
        record.candidates = candidate_records(&diversified, &[]);
        return QuestionArtifacts {
            question_id: question.question_id.clone(),
            diversified: Some(diversified),
            rationales: Vec::new(),
            decision: None,
            record,
        };
    }

    // single-strategy runs skip rationales and fusion entirely
    if config.ablation.strategies.len() == 1 && present.len() == 1 {
        let candidate = present[0];
        let record = QuestionRecord {
            question_id: question.question_id.clone(),
            final_answer: candidate.answer.clone(),
            score: score_answer(question, &candidate.answer),
            chosen_strategy: Some(candidate.strategy),
            fallback_used: false,
            candidates: candidate_records(&diversified, &[]),
            failure: None,
        };
        return QuestionArtifacts {
            question_id: question.question_id.clone(),
            diversified: Some(diversified),
            rationales: Vec::new(),
            decision: None,
            record,
        };
    }

    let rationales = rationales_for(question, &diversified, backends, config, mech_store, qseed);

    let decision: Result<EnsembleDecision, EnsembleError> = match config.ablation.selection {
        SelectionMode::Random => random_select(&present, qseed),
        SelectionMode::Llm => fill_absent_candidates(&present).and_then(|filled| {
            select_answer(
                &backends.base,
                &filled,
                &rationale_pairs(&rationales),
                &diversified.pairs,
                &question.question_text,
                fusion_mode(config.ablation.rationale_mode),
                &config.base_params,
            )
        }),
    };

    let record = match &decision {
        Ok(d) => QuestionRecord {
            question_id: question.question_id.clone(),
            final_answer: d.final_answer.clone(),
            score: score_answer(question, &d.final_answer),
            chosen_strategy: d.chosen_index.map(|i| StrategyKind::ALL[i]),
            fallback_used: d.fallback_used,
            candidates: candidate_records(&diversified, &rationales),
            failure: None,
        },
        Err(e) => {
            let mut r = failed_record(question, e.to_string());
            r.candidates = candidate_records(&diversified, &rationales);
            r
        }
    };
    QuestionArtifacts {
        question_id: question.question_id.clone(),
        diversified: Some(diversified),
        rationales,
        decision: decision.ok(),
        record,
    }
}

/// Runs every question with a fixed-size worker pool. Output order matches
/// input order whatever the scheduling; per-question seeding keeps the
/// answers themselves schedule-independent too.
pub fn run_pipeline(
    questions: &[VQAQuestion],
    backends: &PipelineBackends,
    config: &PipelineConfig,
    mech_store: Option<&CacheStore>,
) -> Result<Vec<QuestionArtifacts>, PipelineError> {
    config.ablation.validate()?;
    let workers = config.workers.max(1).min(questions.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<QuestionArtifacts>>> =
        Mutex::new((0..questions.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..workers {
            handles.push(scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= questions.len() {
                    break;
                }
                let artifacts = run_question(&questions[i], backends, config, mech_store);
                slots.lock().unwrap()[i] = Some(artifacts);
            }));
        }
        for h in handles {
            h.join().map_err(|_| PipelineError::WorkerPanic)?;
        }
        Ok::<(), PipelineError>(())
    })?;

    Ok(slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect())
}

/// Runs the pipeline and builds the score report.
pub fn run_and_score(
    questions: &[VQAQuestion],
    backends: &PipelineBackends,
    config: &PipelineConfig,
    mech_store: Option<&CacheStore>,
) -> Result<(ScoreReport, Vec<QuestionArtifacts>), PipelineError> {
    let artifacts = run_pipeline(questions, backends, config, mech_store)?;
    let dataset = questions
        .first()
        .map(|q| q.dataset)
        .unwrap_or(crate::types::Dataset::Okvqa);
    let report = ScoreReport::from_records(
        dataset,
        config.ablation.fingerprint(),
        artifacts.iter().map(|a| a.record.clone()).collect(),
    );
    Ok((report, artifacts))
}

/// Writes `report.json` and `questions.jsonl` (one artifact per line) into
/// `out_dir`.
pub fn write_outputs(
    out_dir: &Path,
    report: &ScoreReport,
    artifacts: &[QuestionArtifacts],
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|source| StoreError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let report_path = out_dir.join("report.json");
    let body = serde_json::to_vec_pretty(report).map_err(StoreError::from)?;
    std::fs::write(&report_path, body).map_err(|source| StoreError::Io {
        path: report_path,
        source,
    })?;
    let mut writer = RecordWriter::create(out_dir.join("questions.jsonl"))?;
    for a in artifacts {
        writer.append(a)?;
    }
    Ok(())
}
