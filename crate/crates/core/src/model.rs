//! Domain model shared by every other module: segments, roles, judgments,
//! turns, transcripts, and run configuration.
//!
//! All types here are immutable after construction and safe to share or send
//! between threads. Transcripts serialize to single JSON objects with
//! snake_case keys, one per line in a JSONL store.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// The four vulnerability categories a segment can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VulnCategory {
    /// Library/API function call.
    FC,
    /// Arithmetic expression.
    AE,
    /// Array usage.
    AU,
    /// Pointer usage.
    PU,
}

impl VulnCategory {
    /// All four categories, in canonical order.
    pub const ALL: [VulnCategory; 4] = [
        VulnCategory::FC,
        VulnCategory::AE,
        VulnCategory::AU,
        VulnCategory::PU,
    ];

    pub fn code(self) -> &'static str {
        match self {
            VulnCategory::FC => "FC",
            VulnCategory::AE => "AE",
            VulnCategory::AU => "AU",
            VulnCategory::PU => "PU",
        }
    }

    /// One-sentence gloss used when the category semantics must be spelled out.
    pub fn gloss(self) -> &'static str {
        match self {
            VulnCategory::FC => "improper use of a library or API function call",
            VulnCategory::AE => "an arithmetic expression that may overflow, underflow, or divide by zero",
            VulnCategory::AU => "array usage that may read or write out of bounds",
            VulnCategory::PU => "pointer usage that may dereference a null, dangling, or out-of-bounds pointer",
        }
    }
}

impl fmt::Display for VulnCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for VulnCategory {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FC" => Ok(VulnCategory::FC),
            "AE" => Ok(VulnCategory::AE),
            "AU" => Ok(VulnCategory::AU),
            "PU" => Ok(VulnCategory::PU),
            other => Err(ModelError::UnknownCategory(other.to_string())),
        }
    }
}

/// A candidate code snippet with ground-truth label and vulnerability category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSegment {
    pub id: String,
    pub source_text: String,
    /// Ground truth: true = vulnerable.
    pub label: bool,
    pub category: VulnCategory,
}

impl CodeSegment {
    /// Builds a segment, rejecting source text that is empty after trimming.
    pub fn new(
        id: impl Into<String>,
        source_text: impl Into<String>,
        label: bool,
        category: VulnCategory,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        let source_text = source_text.into();
        if source_text.trim().is_empty() {
            return Err(ModelError::EmptySource { id });
        }
        Ok(Self {
            id,
            source_text,
            label,
            category,
        })
    }
}

/// The two personas a discussion assigns to model instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tester,
    Developer,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Tester => "tester",
            Role::Developer => "developer",
        }
    }

    pub fn peer(self) -> Role {
        match self {
            Role::Tester => Role::Developer,
            Role::Developer => Role::Tester,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary verdict: 1 vulnerable, 0 non-vulnerable. Serializes as the bare digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    NonVulnerable,
    Vulnerable,
}

impl Verdict {
    pub fn from_bit(bit: u8) -> Result<Self, ModelError> {
        match bit {
            0 => Ok(Verdict::NonVulnerable),
            1 => Ok(Verdict::Vulnerable),
            other => Err(ModelError::InvalidVerdict(other)),
        }
    }

    pub fn from_label(vulnerable: bool) -> Self {
        if vulnerable {
            Verdict::Vulnerable
        } else {
            Verdict::NonVulnerable
        }
    }

    pub fn as_bit(self) -> u8 {
        match self {
            Verdict::NonVulnerable => 0,
            Verdict::Vulnerable => 1,
        }
    }

    pub fn is_vulnerable(self) -> bool {
        matches!(self, Verdict::Vulnerable)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_bit())
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.as_bit())
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let bit = u8::deserialize(deserializer)?;
        Verdict::from_bit(bit).map_err(serde::de::Error::custom)
    }
}

/// A parsed binary verdict plus free-text reasoning (may be empty).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub verdict: Verdict,
    pub reasoning: String,
}

impl Judgment {
    pub fn new(verdict: Verdict, reasoning: impl Into<String>) -> Self {
        Self {
            verdict,
            reasoning: reasoning.into(),
        }
    }
}

/// Protocol stage a turn belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initialization,
    Discussion,
    Conclusion,
}

/// One model reply inside a discussion, with parsed judgment and token usage.
///
/// `judgment` is absent when the reply text did not parse; such turns are
/// retry attempts (or the final failed attempt) and never advance a round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub role: Role,
    pub stage: Stage,
    pub raw_text: String,
    pub judgment: Option<Judgment>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// True when the backend did not report usage and the counts are
    /// whitespace-token estimates.
    #[serde(default)]
    pub usage_estimated: bool,
}

/// The ordered record of one discussion over one segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscussionTranscript {
    pub segment_id: String,
    pub turns: Vec<Turn>,
    pub rounds_used: u32,
    pub consensus_reached: bool,
    pub final_judgment: Judgment,
}

impl DiscussionTranscript {
    /// The judgment of the last tester turn that carries one, which is the
    /// conclusion rule for every run.
    pub fn last_tester_judgment(&self) -> Option<&Judgment> {
        self.turns
            .iter()
            .rev()
            .filter(|t| t.role == Role::Tester)
            .find_map(|t| t.judgment.as_ref())
    }

    fn last_developer_judgment(&self) -> Option<&Judgment> {
        self.turns
            .iter()
            .rev()
            .filter(|t| t.role == Role::Developer)
            .find_map(|t| t.judgment.as_ref())
    }

    /// Sum of prompt/completion tokens over all turns.
    pub fn token_totals(&self) -> (u64, u64) {
        self.turns.fold_tokens()
    }

    /// Checks the structural invariants against the config the run used.
    /// Returns one message per violation; empty means consistent.
    pub fn check_invariants(&self, config: &RunConfig) -> Vec<String> {
        let mut violations = Vec::new();
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i {
                violations.push(format!(
                    "turn {} has index {} (indices must be contiguous from 0)",
                    i, turn.index
                ));
            }
            if !turn.usage_estimated && turn.completion_tokens > u64::from(config.max_response_tokens)
            {
                violations.push(format!(
                    "turn {} reports {} completion tokens, above the {} cap",
                    i, turn.completion_tokens, config.max_response_tokens
                ));
            }
        }
        if self.rounds_used < 1 {
            violations.push("rounds_used must be >= 1".to_string());
        }
        if self.rounds_used > config.max_depth {
            violations.push(format!(
                "rounds_used {} exceeds max_depth {}",
                self.rounds_used, config.max_depth
            ));
        }
        match self.last_tester_judgment() {
            Some(j) if j.verdict == self.final_judgment.verdict => {}
            Some(j) => violations.push(format!(
                "final_judgment verdict {} differs from last tester verdict {}",
                self.final_judgment.verdict, j.verdict
            )),
            None => violations.push("no tester turn carries a judgment".to_string()),
        }
        if self.consensus_reached {
            match (self.last_tester_judgment(), self.last_developer_judgment()) {
                (Some(t), Some(d)) if t.verdict == d.verdict => {}
                // Single-role runs have no developer turns; consensus holds by convention.
                (Some(_), None) => {}
                _ => violations.push(
                    "consensus_reached but latest tester and developer verdicts differ".to_string(),
                ),
            }
        }
        violations
    }
}

trait FoldTokens {
    fn fold_tokens(&self) -> (u64, u64);
}

impl FoldTokens for [Turn] {
    fn fold_tokens(&self) -> (u64, u64) {
        self.iter().fold((0, 0), |(p, c), t| {
            (p + t.prompt_tokens, c + t.completion_tokens)
        })
    }
}

/// Basic prompt vs chain-of-thought (step-by-step) prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Basic,
    #[serde(alias = "cot")]
    ChainOfThought,
}

impl PromptStyle {
    pub fn name(self) -> &'static str {
        match self {
            PromptStyle::Basic => "basic",
            PromptStyle::ChainOfThought => "chain_of_thought",
        }
    }

    /// Short tag used in template file names.
    pub fn file_tag(self) -> &'static str {
        match self {
            PromptStyle::Basic => "basic",
            PromptStyle::ChainOfThought => "cot",
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Single-role baseline (one tester query) or the multi-role discussion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    SingleRole,
    MultiRole,
}

impl Approach {
    pub fn name(self) -> &'static str {
        match self {
            Approach::SingleRole => "single_role",
            Approach::MultiRole => "multi_role",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_MAX_DEPTH: u32 = 5;
pub const DEFAULT_MAX_RESPONSE_TOKENS: u32 = 120;
pub const DEFAULT_MODEL_NAME: &str = "gpt-3.5-turbo-0125";
pub const DEFAULT_PARSE_RETRIES: u32 = 2;

/// Configuration for one run: discussion bounds, model, prompt style, approach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_max_depth")]
    pub max_depth: u32,
    #[serde(default = "default_max_response_tokens")]
    pub max_response_tokens: u32,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    pub prompt_style: PromptStyle,
    pub approach: Approach,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_parse_retries")]
    pub parse_retries: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_depth() -> u32 {
    DEFAULT_MAX_DEPTH
}

fn default_max_response_tokens() -> u32 {
    DEFAULT_MAX_RESPONSE_TOKENS
}

fn default_model_name() -> String {
    DEFAULT_MODEL_NAME.to_string()
}

fn default_parse_retries() -> u32 {
    DEFAULT_PARSE_RETRIES
}

impl RunConfig {
    /// Default bounds with the given approach and prompt style.
    pub fn new(approach: Approach, prompt_style: PromptStyle) -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            max_response_tokens: DEFAULT_MAX_RESPONSE_TOKENS,
            model_name: DEFAULT_MODEL_NAME.to_string(),
            prompt_style,
            approach,
            temperature: 0.0,
            parse_retries: DEFAULT_PARSE_RETRIES,
            seed: 0,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::new(Approach::MultiRole, PromptStyle::Basic)
    }
}

/// Returns the config unchanged if every bound holds; otherwise reports each
/// violated bound with its field name.
pub fn validate_config(config: RunConfig) -> Result<RunConfig, ConfigError> {
    let mut violations = Vec::new();
    if config.max_depth < 1 {
        violations.push("max_depth must be >= 1".to_string());
    }
    if config.max_response_tokens < 1 {
        violations.push("max_response_tokens must be >= 1".to_string());
    }
    if config.temperature < 0.0 || !config.temperature.is_finite() {
        violations.push("temperature must be a finite value >= 0.0".to_string());
    }
    if config.model_name.trim().is_empty() {
        violations.push("model_name must be non-empty".to_string());
    }
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError { violations })
    }
}

/// All bounds violated by a [`RunConfig`], one message per field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.violations.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown vulnerability category '{0}' (expected FC, AE, AU, or PU)")]
    UnknownCategory(String),
    #[error("segment '{id}' has empty source text")]
    EmptySource { id: String },
    #[error("verdict must be 0 or 1, got {0}")]
    InvalidVerdict(u8),
}
