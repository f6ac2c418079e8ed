//! Golden-file tests for the four prompt templates. Each fixture is a JSON
//! slot file plus a `.golden.txt` holding the expected canonical prompt bytes
//! (plus one trailing newline added by text-file convention). The goldens
//! were transcribed independently of the builders and are the byte contract.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use kvqa_core::prompts::{
    build_answer_prompt, build_auto_rationale_prompt, build_fusion_prompt,
    build_knowledge_prompt, FusionRationales, KnowledgeForm, RationalePair, RenderedPrompt,
};
use kvqa_core::types::{AnswerCandidate, QAPair, StrategyKind};

#[derive(Deserialize)]
struct Fixture {
    template: String,
    #[serde(default)]
    context: Option<String>,
    #[serde(default)]
    captions_block: Option<String>,
    #[serde(default)]
    pairs: Vec<(String, String)>,
    question: String,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    form: Option<String>,
    #[serde(default)]
    answers: Option<Vec<String>>,
    #[serde(default)]
    rationales: Option<Vec<(String, String)>>,
    #[serde(default)]
    mode: Option<String>,
}

fn templates_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("templates")
}

fn qa_pairs(fixture: &Fixture) -> Vec<QAPair> {
    fixture
        .pairs
        .iter()
        .map(|(q, a)| QAPair::new(q.clone(), a.clone()))
        .collect()
}

fn render(fixture: &Fixture) -> RenderedPrompt {
    let pairs = qa_pairs(fixture);
    match fixture.template.as_str() {
        "answer" => build_answer_prompt(
            fixture.context.as_deref().unwrap(),
            &pairs,
            &fixture.question,
        )
        .unwrap(),
        "knowledge" => {
            let form = match fixture.form.as_deref().unwrap() {
                "short" => KnowledgeForm::Short,
                "long" => KnowledgeForm::Long,
                other => panic!("unknown form {other}"),
            };
            build_knowledge_prompt(
                fixture.captions_block.as_deref().unwrap(),
                &pairs,
                &fixture.question,
                form,
            )
            .unwrap()
        }
        "auto_rationale" => build_auto_rationale_prompt(
            fixture.context.as_deref().unwrap(),
            &pairs,
            &fixture.question,
            fixture.answer.as_deref().unwrap(),
        )
        .unwrap(),
        "fusion" => {
            let answers = fixture.answers.as_ref().unwrap();
            let candidates: Vec<AnswerCandidate> = StrategyKind::ALL
                .iter()
                .zip(answers)
                .map(|(&strategy, a)| AnswerCandidate {
                    strategy,
                    answer: a.clone(),
                    raw_output: a.clone(),
                })
                .collect();
            let rationales: Vec<RationalePair> = fixture
                .rationales
                .as_ref()
                .unwrap()
                .iter()
                .map(|(ar, mr)| RationalePair {
                    automatic: ar.clone(),
                    mechanistic: mr.clone(),
                })
                .collect();
            let mode = match fixture.mode.as_deref().unwrap() {
                "both" => FusionRationales::Both,
                "automatic_only" => FusionRationales::AutomaticOnly,
                "mechanistic_only" => FusionRationales::MechanisticOnly,
                "none" => FusionRationales::None,
                other => panic!("unknown mode {other}"),
            };
            build_fusion_prompt(&candidates, &rationales, &pairs, &fixture.question, mode)
                .unwrap()
        }
        other => panic!("unknown template {other}"),
    }
}

fn check_template_dir(name: &str) -> usize {
    let dir = templates_dir().join(name);
    let mut checked = 0;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("missing {}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
        .collect();
    entries.sort();
    for json_path in entries {
        let fixture: Fixture =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(fixture.template, name, "{}", json_path.display());
        let golden_path = json_path.with_extension("").with_extension("golden.txt");
        let golden = std::fs::read_to_string(&golden_path)
            .unwrap_or_else(|e| panic!("missing {}: {e}", golden_path.display()));
        let expected = golden
            .strip_suffix('\n')
            .unwrap_or_else(|| panic!("{} must end with newline", golden_path.display()));
        let rendered = render(&fixture).canonical_text();
        assert_eq!(
            rendered.as_bytes(),
            expected.as_bytes(),
            "byte mismatch for {}",
            json_path.display()
        );
        checked += 1;
    }
    checked
}

#[test]
fn answer_templates_match_goldens() {
    assert!(check_template_dir("answer") >= 5);
}

#[test]
fn knowledge_templates_match_goldens() {
    assert!(check_template_dir("knowledge") >= 5);
}

#[test]
fn auto_rationale_templates_match_goldens() {
    assert!(check_template_dir("auto_rationale") >= 5);
}

#[test]
fn fusion_templates_match_goldens() {
    assert!(check_template_dir("fusion") >= 5);
}
