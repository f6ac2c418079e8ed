//! Zero-shot knowledge-based VQA pipeline.
//!
//! The pipeline answers a visual question three times, each from a different
//! textual decision context (image captions, one-sentence background
//! knowledge, multi-sentence background knowledge), explains each candidate
//! answer with two kinds of rationale (an LLM-written summary and the context
//! sentence with the highest gradient-weighted attention contribution), and
//! finally asks an LLM to pick one answer given the rationales.
//!
//! Crate layout mirrors the pipeline stages: [`diversify`] produces contexts
//! and candidates, [`rationalize`] produces rationales, [`ensemble`] selects
//! the final answer, [`evaluate`] scores and ablates, [`store`] caches every
//! model call, and [`backends`] holds the model interfaces plus deterministic
//! scripted fakes and a tiny in-repo transformer used for attribution tests.

pub mod backends;
pub mod diversify;
pub mod ensemble;
pub mod evaluate;
pub mod pipeline;
pub mod prompts;
pub mod rationalize;
pub mod store;
pub mod text;
pub mod types;

pub use types::{
    AnswerCandidate, Caption, DecisionContext, DecodeParams, EnsembleDecision, QAPair, Rationale,
    StrategyKind, VQAQuestion,
};
