//! Command implementations for the batch runner. Everything here returns
//! [`CliError`], which the binary maps onto exit codes: 0 success, 1 runtime
//! failure, 2 usage or configuration error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use kvqa_core::backends::fakes::{
    ScriptedCaptioner, ScriptedLm, ScriptedQaGen, ScriptedTraceLm,
};
use kvqa_core::backends::http::HttpLm;
use kvqa_core::backends::tiny::{TinyTransformer, TinyTransformerConfig};
use kvqa_core::evaluate::{
    load_aokvqa, load_okvqa, rationale_hit_rate, sample_questions, vqa_score, AblationConfig,
    RationaleMode, ScoreReport, SelectionMode,
};
use kvqa_core::pipeline::{
    run_and_score, write_outputs, PipelineBackends, PipelineConfig, QuestionArtifacts,
};
use kvqa_core::store::{read_records, CacheStore};
use kvqa_core::types::{Dataset, StrategyKind, VQAQuestion};

/// Environment variable overriding the configured cache root.
pub const CACHE_ROOT_ENV: &str = "KVQA_CACHE_ROOT";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config file, missing input paths.
    Usage(String),
    /// The run itself failed.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
pub struct FileConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub backends: BackendsSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub cache: CacheSection,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    /// 0 means the full split.
    #[serde(default)]
    pub limit: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub output_dir: PathBuf,
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
pub struct DatasetSection {
    pub kind: Dataset,
    #[serde(default)]
    pub questions: Option<PathBuf>,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    #[serde(default)]
    pub records: Option<PathBuf>,
    /// Accept fixture subsets smaller than the official split.
    #[serde(default)]
    pub allow_partial: bool,
}

#[derive(Debug, Clone, Deserialize)]
pub struct BackendsSection {
    /// "scripted" (all five from fixture files), "tiny" (in-repo transformer
    /// for answering and tracing, fixtures for the rest), or "http"
    /// (OpenAI-style endpoint for chat/base, tiny transformer for tracing,
    /// fixtures for captions and QA pairs).
    pub kind: String,
    #[serde(default)]
    pub captions: Option<PathBuf>,
    #[serde(default)]
    pub qa_pairs: Option<PathBuf>,
    #[serde(default)]
    pub chat: Option<PathBuf>,
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub chat_model: Option<String>,
    #[serde(default)]
    pub base_model: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PipelineSection {
    #[serde(default = "all_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default = "default_rationale_mode")]
    pub rationale_mode: RationaleMode,
    #[serde(default = "default_selection")]
    pub selection: SelectionMode,
    #[serde(default = "default_captions")]
    pub captions_per_image: usize,
    #[serde(default = "default_captions")]
    pub qa_pairs_per_image: usize,
}

fn all_strategies() -> Vec<StrategyKind> {
    StrategyKind::ALL.to_vec()
}

fn default_rationale_mode() -> RationaleMode {
    RationaleMode::ArPlusMr
}

fn default_selection() -> SelectionMode {
    SelectionMode::Llm
}

fn default_captions() -> usize {
    30
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            strategies: all_strategies(),
            rationale_mode: default_rationale_mode(),
            selection: default_selection(),
            captions_per_image: default_captions(),
            qa_pairs_per_image: default_captions(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CacheSection {
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub enabled: bool,
}

pub fn load_config(path: &Path) -> Result<FileConfig, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&raw).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

/// Flag-level overrides of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub limit: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub cache_root: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// Cache root precedence: flag, then env var, then config file.
pub fn resolve_cache_root(
    config: &CacheSection,
    overrides: &Overrides,
) -> Option<PathBuf> {
    if let Some(root) = &overrides.cache_root {
        return Some(root.clone());
    }
    if let Ok(root) = std::env::var(CACHE_ROOT_ENV) {
        if !root.is_empty() {
            return Some(PathBuf::from(root));
        }
    }
    config.root.clone()
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

pub fn load_questions(section: &DatasetSection) -> Result<Vec<VQAQuestion>, CliError> {
    let missing = |field: &str| usage(format!("dataset.{field} is required for {:?}", section.kind));
    let questions = match section.kind {
        Dataset::Okvqa => {
            let q = section.questions.as_ref().ok_or_else(|| missing("questions"))?;
            let a = section
                .annotations
                .as_ref()
                .ok_or_else(|| missing("annotations"))?;
            check_exists(q)?;
            check_exists(a)?;
            load_okvqa(q, a, section.allow_partial)
        }
        Dataset::AokvqaVal | Dataset::AokvqaTest => {
            let r = section.records.as_ref().ok_or_else(|| missing("records"))?;
            check_exists(r)?;
            load_aokvqa(r, section.kind, section.allow_partial)
        }
    };
    questions.map_err(|e| usage(format!("dataset load failed: {e}")))
}

fn check_exists(path: &Path) -> Result<(), CliError> {
    if !path.exists() {
        return Err(usage(format!("dataset path {} does not exist", path.display())));
    }
    Ok(())
}

fn fixture_path<'a>(
    section: &'a BackendsSection,
    field: &str,
    value: &'a Option<PathBuf>,
) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("backends.{field} is required for kind {}", section.kind)))
}

pub fn build_backends(section: &BackendsSection) -> Result<PipelineBackends, CliError> {
    let bad_fixture = |e: kvqa_core::backends::BackendError| usage(e.to_string());
    let captioner = Arc::new(
        ScriptedCaptioner::from_fixture(fixture_path(section, "captions", &section.captions)?)
            .map_err(bad_fixture)?,
    );
    let qa_gen = Arc::new(
        ScriptedQaGen::from_fixture(fixture_path(section, "qa_pairs", &section.qa_pairs)?)
            .map_err(bad_fixture)?,
    );
    match section.kind.as_str() {
        "scripted" => {
            let chat = ScriptedLm::from_fixture(
                "scripted-chat",
                fixture_path(section, "chat", &section.chat)?,
            )
            .map_err(bad_fixture)?;
            let base = ScriptedLm::from_fixture(
                "scripted-base",
                fixture_path(section, "base", &section.base)?,
            )
            .map_err(bad_fixture)?;
            let trace = ScriptedTraceLm::from_fixture(
                "scripted-base",
                fixture_path(section, "trace", &section.trace)?,
            )
            .map_err(bad_fixture)?;
            Ok(PipelineBackends {
                captioner,
                qa_gen,
                chat: Arc::new(chat),
                base: Arc::new(base),
                tracer: Arc::new(trace),
            })
        }
        "tiny" => {
            let chat = ScriptedLm::from_fixture(
                "scripted-chat",
                fixture_path(section, "chat", &section.chat)?,
            )
            .map_err(bad_fixture)?;
            let tiny = Arc::new(TinyTransformer::new(TinyTransformerConfig::default()));
            Ok(PipelineBackends {
                captioner,
                qa_gen,
                chat: Arc::new(chat),
                base: tiny.clone(),
                tracer: tiny,
            })
        }
        "http" => {
            let endpoint = section
                .endpoint
                .as_deref()
                .ok_or_else(|| usage("backends.endpoint is required for kind http"))?;
            let chat_model = section.chat_model.as_deref().unwrap_or("chat");
            let base_model = section.base_model.as_deref().unwrap_or("base");
            let tiny = Arc::new(TinyTransformer::new(TinyTransformerConfig::default()));
            Ok(PipelineBackends {
                captioner,
                qa_gen,
                chat: Arc::new(HttpLm::new(chat_model, endpoint)),
                base: Arc::new(HttpLm::new(base_model, endpoint)),
                tracer: tiny,
            })
        }
        other => Err(usage(format!("unknown backends.kind {other:?}"))),
    }
}

fn pipeline_config(config: &FileConfig, ablation: AblationConfig, workers: usize) -> PipelineConfig {
    let mut pc = PipelineConfig::new(ablation);
    pc.captions_per_image = config.pipeline.captions_per_image;
    pc.qa_pairs_per_image = config.pipeline.qa_pairs_per_image;
    pc.workers = workers;
    pc
}

fn select_questions(
    config: &FileConfig,
    overrides: &Overrides,
) -> Result<Vec<VQAQuestion>, CliError> {
    let questions = load_questions(&config.dataset)?;
    let limit = overrides.limit.unwrap_or(config.run.limit);
    let seed = overrides.seed.unwrap_or(config.run.seed);
    if limit == 0 {
        return Ok(questions);
    }
    Ok(sample_questions(&questions, limit, seed))
}

struct Prepared {
    questions: Vec<VQAQuestion>,
    backends: PipelineBackends,
    store: Option<CacheStore>,
    output_dir: PathBuf,
    seed: u64,
    workers: usize,
}

fn prepare(config: &FileConfig, overrides: &Overrides) -> Result<Prepared, CliError> {
    let questions = select_questions(config, overrides)?;
    let mut backends = build_backends(&config.backends)?;
    let store = if config.cache.enabled || overrides.cache_root.is_some() {
        let root = resolve_cache_root(&config.cache, overrides)
            .ok_or_else(|| usage("cache enabled but no cache root configured"))?;
        let store = CacheStore::open(&root).map_err(|e| runtime(e.to_string()))?;
        backends = backends.with_cache(&store);
        Some(store)
    } else {
        None
    };
    Ok(Prepared {
        questions,
        backends,
        store,
        output_dir: overrides
            .output_dir
            .clone()
            .unwrap_or_else(|| config.run.output_dir.clone()),
        seed: overrides.seed.unwrap_or(config.run.seed),
        workers: overrides.workers.unwrap_or(config.run.workers).max(1),
    })
}

fn execute(
    prepared: &Prepared,
    config: &FileConfig,
    ablation: AblationConfig,
    out_dir: &Path,
) -> Result<ScoreReport, CliError> {
    let pc = pipeline_config(config, ablation, prepared.workers);
    let (report, artifacts) = run_and_score(
        &prepared.questions,
        &prepared.backends,
        &pc,
        prepared.store.as_ref(),
    )
    .map_err(|e| runtime(e.to_string()))?;
    for record in &report.records {
        if let Some(f) = &record.failure {
            eprintln!("warn: question {} failed: {f}", record.question_id);
        }
    }
    write_outputs(out_dir, &report, &artifacts).map_err(|e| runtime(e.to_string()))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<ScoreReport, CliError> {
    let config = load_config(config_path)?;
    let prepared = prepare(&config, overrides)?;
    let ablation = AblationConfig {
        strategies: config.pipeline.strategies.clone(),
        rationale_mode: config.pipeline.rationale_mode,
        selection: config.pipeline.selection,
        seed: prepared.seed,
    };
    ablation.validate().map_err(|e| usage(e.to_string()))?;
    let out = prepared.output_dir.clone();
    let report = execute(&prepared, &config, ablation, &out)?;
    println!(
        "run complete: {} questions, mean score {:.4}, config {}",
        report.n_questions, report.mean_vqa_score, report.config_fingerprint
    );
    Ok(report)
}

/// Which ablation table a row belongs to: 2 varies the strategy set, 3 varies
/// rationales and selection.
pub fn ablation_row(table: u8, row: usize, seed: u64) -> Result<AblationConfig, CliError> {
    let cfg = match table {
        2 => AblationConfig::diversification_row(row, seed),
        3 => AblationConfig::rationalization_row(row, seed),
        other => return Err(usage(format!("unknown ablation table {other}, expected 2 or 3"))),
    };
    cfg.map_err(|e| usage(e.to_string()))
}

pub fn cmd_ablate(
    config_path: &Path,
    table: u8,
    row: Option<usize>,
    grid: bool,
    overrides: &Overrides,
) -> Result<Vec<ScoreReport>, CliError> {
    if row.is_some() == grid {
        return Err(usage("pass exactly one of --row N or --grid"));
    }
    let config = load_config(config_path)?;
    let prepared = prepare(&config, overrides)?;
    let rows: Vec<usize> = match row {
        Some(r) => vec![r],
        None => (1..=6).collect(),
    };
    let mut reports = Vec::new();
    for r in rows {
        let ablation = ablation_row(table, r, prepared.seed)?;
        let out = prepared.output_dir.join(format!("table{table}_row{r}"));
        let report = execute(&prepared, &config, ablation, &out)?;
        println!(
            "table {table} row {r}: mean score {:.4}, config {}",
            report.mean_vqa_score, report.config_fingerprint
        );
        reports.push(report);
    }
    Ok(reports)
}

pub fn cmd_score(
    config_path: &Path,
    predictions_path: &Path,
    overrides: &Overrides,
) -> Result<f64, CliError> {
    let config = load_config(config_path)?;
    let questions = select_questions(&config, overrides)?;
    let raw = std::fs::read_to_string(predictions_path)
        .map_err(|e| usage(format!("cannot read predictions {}: {e}", predictions_path.display())))?;
    let predictions: HashMap<String, String> = serde_json::from_str(&raw)
        .map_err(|e| usage(format!("invalid predictions {}: {e}", predictions_path.display())))?;
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut missing = Vec::new();
    for q in &questions {
        if q.annotations.is_empty() {
            continue;
        }
        match predictions.get(&q.question_id) {
            Some(answer) => {
                total += vqa_score(answer, &q.annotations).map_err(|e| runtime(e.to_string()))?;
                scored += 1;
            }
            None => missing.push(q.question_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(runtime(format!(
            "{} questions lack predictions (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    if scored == 0 {
        return Err(runtime("no scorable questions".to_string()));
    }
    let mean = total / scored as f64;
    println!("mean vqa score over {scored} questions: {mean:.4}");
    Ok(mean)
}

/// Tabular sentence-relevance view of one question from a finished run.
pub fn inspect_lines(run_dir: &Path, question_id: &str) -> Result<Vec<String>, CliError> {
    let records_path = run_dir.join("questions.jsonl");
    let artifacts: Vec<QuestionArtifacts> =
        read_records(&records_path).map_err(|e| runtime(e.to_string()))?;
    let artifact = artifacts
        .iter()
        .find(|a| a.question_id == question_id)
        .ok_or_else(|| runtime(format!("question {question_id} not found in run")))?;

    let mut lines = vec!["strategy\tsentence\trelevance\ttext".to_string()];
    let diversified = artifact
        .diversified
        .as_ref()
        .ok_or_else(|| runtime(format!("question {question_id} has no diversification record")))?;
    for outcome in &diversified.outcomes {
        let label = outcome.kind.label();
        let Some(context) = &outcome.context else {
            lines.push(format!("{label}\t-\tno profile\t-"));
            continue;
        };
        let profile = artifact
            .rationales
            .iter()
            .find(|r| r.strategy == outcome.kind)
            .and_then(|r| r.relevance.as_ref());
        match profile {
            Some(profile) => {
                for &(i, score) in &profile.per_sentence {
                    let text = context.sentence(i).unwrap_or("");
                    lines.push(format!("{label}\t{i}\t{score:.6}\t{text}"));
                }
            }
            None => {
                for (i, _) in context.sentence_spans.iter().enumerate() {
                    let text = context.sentence(i).unwrap_or("");
                    lines.push(format!("{label}\t{i}\tno profile\t{text}"));
                }
            }
        }
    }
    lines.push(String::new());
    lines.push(format!(
        "final answer: {} (fallback: {})",
        artifact.record.final_answer, artifact.record.fallback_used
    ));
    for c in &artifact.record.candidates {
        lines.push(format!(
            "{}: answer={} ar={} mr={}",
            c.strategy.label(),
            c.answer.as_deref().unwrap_or("-"),
            c.automatic_rationale.as_deref().unwrap_or("-"),
            c.mechanistic_rationale.as_deref().unwrap_or("-"),
        ));
    }
    Ok(lines)
}

pub fn cmd_inspect(run_dir: &Path, question_id: &str) -> Result<(), CliError> {
    for line in inspect_lines(run_dir, question_id)? {
        println!("{line}");
    }
    Ok(())
}

pub fn cmd_cache_ls(root: &Path) -> Result<Vec<(String, u64)>, CliError> {
    let store = CacheStore::open(root).map_err(|e| runtime(e.to_string()))?;
    let entries = store.list().map_err(|e| runtime(e.to_string()))?;
    for (key, size) in &entries {
        println!("{key}\t{size}");
    }
    println!("{} entries", entries.len());
    Ok(entries)
}

pub fn cmd_cache_purge(root: &Path) -> Result<usize, CliError> {
    let store = CacheStore::open(root).map_err(|e| runtime(e.to_string()))?;
    let removed = store.purge().map_err(|e| runtime(e.to_string()))?;
    println!("removed {removed} entries");
    Ok(removed)
}

/// Hit-rate table over a finished run, used by `inspect --hit-rates`.
pub fn hit_rate_lines(run_dir: &Path) -> Result<Vec<String>, CliError> {
    let report_path = run_dir.join("report.json");
    let raw = std::fs::read_to_string(&report_path)
        .map_err(|e| runtime(format!("cannot read {}: {e}", report_path.display())))?;
    let report: ScoreReport =
        serde_json::from_str(&raw).map_err(|e| runtime(e.to_string()))?;
    let mut lines =
        vec!["strategy\tp_sel|ar_hit\tp_sel|mr_hit\tp_sel|either\tp_sel|neither".to_string()];
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for row in rationale_hit_rate(&report.records) {
        lines.push(format!(
            "{}\t{}\t{}\t{}\t{}",
            row.strategy.label(),
            fmt(row.p_selected_given_ar_hit),
            fmt(row.p_selected_given_mr_hit),
            fmt(row.p_selected_given_either_hit),
            fmt(row.p_selected_given_neither_hit),
        ));
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
output_dir = "out"
seed = 7

[dataset]
kind = "okvqa"
questions = "q.json"
annotations = "a.json"
allow_partial = true

[backends]
kind = "scripted"
captions = "captions.json"
qa_pairs = "qa.json"
chat = "chat.json"
base = "base.json"
trace = "trace.json"

[pipeline]
strategies = ["caption_only", "short_knowledge"]
rationale_mode = "ar_only"
selection = "llm"

[cache]
root = "cachedir"
enabled = true
"#;

    #[test]
    fn config_parses_with_overridable_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.run.seed, 7);
        assert_eq!(config.pipeline.strategies.len(), 2);
        assert_eq!(config.pipeline.rationale_mode, RationaleMode::ArOnly);
        assert!(config.cache.enabled);
    }

    #[test]
    fn config_defaults_fill_missing_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(
            &path,
            r#"
[run]
output_dir = "out"
[dataset]
kind = "aokvqa_val"
records = "r.json"
[backends]
kind = "scripted"
"#,
        )
        .unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.pipeline.strategies, StrategyKind::ALL.to_vec());
        assert_eq!(config.run.workers, 4);
        assert!(!config.cache.enabled);
    }

    #[test]
    fn invalid_config_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "not toml [[").unwrap();
        let err = load_config(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn ablation_rows_map_to_tables() {
        let c = ablation_row(2, 2, 0).unwrap();
        assert_eq!(c.strategies, vec![StrategyKind::ShortKnowledge]);
        let c = ablation_row(3, 5, 0).unwrap();
        assert_eq!(c.rationale_mode, RationaleMode::ArPlusRandomMr);
        assert!(ablation_row(2, 9, 0).is_err());
        assert!(ablation_row(4, 1, 0).is_err());
        assert_eq!(ablation_row(2, 9, 0).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn cache_root_precedence() {
        let section = CacheSection {
            root: Some(PathBuf::from("from-config")),
            enabled: true,
        };
        let mut overrides = Overrides::default();
        assert_eq!(
            resolve_cache_root(&section, &overrides),
            Some(PathBuf::from("from-config"))
        );
        overrides.cache_root = Some(PathBuf::from("from-flag"));
        assert_eq!(
            resolve_cache_root(&section, &overrides),
            Some(PathBuf::from("from-flag"))
        );
    }

    #[test]
    fn missing_dataset_path_is_usage_error() {
        let section = DatasetSection {
            kind: Dataset::Okvqa,
            questions: Some(PathBuf::from("/nonexistent/q.json")),
            annotations: Some(PathBuf::from("/nonexistent/a.json")),
            records: None,
            allow_partial: true,
        };
        let err = load_questions(&section).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
