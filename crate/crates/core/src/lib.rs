//! Knowledge-graph-guided question decomposition for physics QA.
//!
//! The pipeline turns a question into a knowledge graph, derives sub-queries
//! from the graph, answers each sub-query with a few-shot prompt, and
//! synthesizes a final answer from the sub-answers given as facts. Two
//! baselines (direct prompting and graph-free decomposition) share the same
//! transport, tracing, and grading machinery, so all three methods can be
//! compared on equal footing — fully offline when driven by a replay cassette
//! or a scripted provider.
//!
//! Modules:
//! - [`kg`] — graph model, dialect-tolerant parsing, canonical serialization
//! - [`extract`] — structured payloads out of free-form completions
//! - [`prompt`] — versioned prompt templates and few-shot assembly
//! - [`provider`] — chat-completion transport: live HTTP, record/replay, scripted
//! - [`pipeline`] — the three reasoning methods and per-question traces
//! - [`dataset`] — question-bank ingestion and resumable dataset builds
//! - [`eval`] — grading, success-rate tables, survey aggregation
//! - [`cli`] — the `kgqd` command-line entry point

pub mod cli;
pub mod dataset;
pub mod eval;
pub mod extract;
pub mod kg;
pub mod pipeline;
pub mod prompt;
pub mod provider;

pub use dataset::{Category, GoldAnswer, QuestionRecord};
pub use extract::{ChoiceAnswer, Quantity};
pub use kg::{KnowledgeGraph, ValidationReport};
pub use pipeline::{Method, ReasoningTrace};
pub use provider::{ChatRequest, ChatResponse, CompletionProvider};
