//! consilium: two-persona LLM code-review discussions for vulnerability
//! detection.
//!
//! A tester and a developer persona each judge a code segment (1 vulnerable,
//! 0 non-vulnerable), exchange their judgments and reasoning over bounded
//! discussion rounds, and conclude on the tester's latest judgment once they
//! agree or the depth cap is reached. The crate ships the protocol engine,
//! the prompt templates, the verdict parser, corpus loading and group
//! sampling, precision/recall/F1 evaluation, and two chat backends: an
//! OpenAI-compatible HTTP client and a deterministic scripted double for
//! offline runs and tests.

pub mod backend;
pub mod corpus;
pub mod engine;
pub mod evalkit;
#[cfg(feature = "http")]
pub mod http;
pub mod model;
pub mod parser;
pub mod prompting;

pub use backend::{ChatBackend, ChatRequest, ChatResponse, ScriptedBackend, UsageTotals};
pub use engine::{Engine, EngineError};
pub use model::{
    Approach, CodeSegment, DiscussionTranscript, Judgment, PromptStyle, Role, RunConfig, Stage,
    Turn, Verdict, VulnCategory,
};
pub use parser::{parse_judgment, ParseOutcome, ParseRule};
pub use prompting::TemplateSet;
