//! Experiment plan: what to run, against which backend, into which directory.
//!
//! A plan is a JSON file; `run` flags can override the backend selection,
//! script path, output directory, and parallelism.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use consilium::corpus::GroupSpec;
use consilium::model::{
    validate_config, Approach, PromptStyle, RunConfig, DEFAULT_MAX_DEPTH,
    DEFAULT_MAX_RESPONSE_TOKENS, DEFAULT_MODEL_NAME, DEFAULT_PARSE_RETRIES,
};

pub const DEFAULT_PARALLELISM: usize = 4;

/// Which backend the plan runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Live,
    Scripted,
}

/// Bounds shared by every config in the sweep (everything in a [`RunConfig`]
/// except approach and prompt style, which the sweep enumerates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub max_depth: u32,
    pub max_response_tokens: u32,
    pub model_name: String,
    pub temperature: f64,
    pub parse_retries: u32,
    pub seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            max_response_tokens: DEFAULT_MAX_RESPONSE_TOKENS,
            model_name: DEFAULT_MODEL_NAME.to_string(),
            temperature: 0.0,
            parse_retries: DEFAULT_PARSE_RETRIES,
            seed: 0,
        }
    }
}

impl BaseConfig {
    pub fn into_config(&self, approach: Approach, prompt_style: PromptStyle) -> RunConfig {
        RunConfig {
            max_depth: self.max_depth,
            max_response_tokens: self.max_response_tokens,
            model_name: self.model_name.clone(),
            prompt_style,
            approach,
            temperature: self.temperature,
            parse_retries: self.parse_retries,
            seed: self.seed,
        }
    }
}

/// A full experiment: corpus, groups, config sweep, backend, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub corpus: PathBuf,
    pub groups: Vec<GroupSpec>,
    pub approaches: Vec<Approach>,
    pub prompt_styles: Vec<PromptStyle>,
    #[serde(default, rename = "config")]
    pub base: BaseConfig,
    pub backend: BackendChoice,
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Optional directory of template overrides.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

impl ExperimentPlan {
    pub fn from_file(path: &Path) -> Result<Self, PlanError> {
        let text = fs::read_to_string(path).map_err(|e| PlanError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| PlanError::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// The (approach x prompt style) cross product, each validated.
    pub fn sweep(&self) -> Result<Vec<RunConfig>, PlanError> {
        let mut configs = Vec::new();
        for &approach in &self.approaches {
            for &style in &self.prompt_styles {
                let config = validate_config(self.base.into_config(approach, style))
                    .map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
                configs.push(config);
            }
        }
        Ok(configs)
    }

    /// Checks plan invariants and prepares the output directory.
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.approaches.is_empty() || self.prompt_styles.is_empty() {
            return Err(PlanError::EmptySweep);
        }
        self.sweep()?;
        if self.parallelism < 1 {
            return Err(PlanError::InvalidParallelism(self.parallelism));
        }
        if self.backend == BackendChoice::Scripted && self.script.is_none() {
            return Err(PlanError::MissingScript);
        }
        fs::create_dir_all(&self.out_dir).map_err(|e| PlanError::OutDir {
            path: self.out_dir.display().to_string(),
            detail: e.to_string(),
        })?;
        // Writability: probe with a temp file rather than trusting metadata.
        let probe = self.out_dir.join(".consilium-write-probe");
        fs::write(&probe, b"").map_err(|e| PlanError::OutDir {
            path: self.out_dir.display().to_string(),
            detail: e.to_string(),
        })?;
        let _ = fs::remove_file(&probe);
        Ok(())
    }

    pub fn store_path(&self) -> PathBuf {
        self.out_dir.join("transcripts.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("cannot read plan '{path}': {detail}")]
    Io { path: String, detail: String },
    #[error("malformed plan '{path}': {detail}")]
    Malformed { path: String, detail: String },
    #[error("sweep is empty: approaches and prompt_styles must both be non-empty")]
    EmptySweep,
    #[error("{0}")]
    InvalidConfig(String),
    #[error("parallelism must be >= 1, got {0}")]
    InvalidParallelism(usize),
    #[error("backend 'scripted' requires a script path")]
    MissingScript,
    #[error("output directory '{path}' is not usable: {detail}")]
    OutDir { path: String, detail: String },
}
