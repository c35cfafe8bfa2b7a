//! Builds every prompt string used by the protocol: role-setting system
//! prompts, initial task prompts (basic and chain-of-thought), and the
//! incremental discussion prompts that relay the counterpart's latest
//! judgment and reasoning.
//!
//! Prompt wording is data, not code: the six default templates live under
//! `templates/` and can be overridden per experiment by a directory of
//! `<role>-<stage>[-<style>].txt` files using `{{name}}` placeholders.
//! Rendering is pure; the same inputs always produce byte-identical output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use regex::Regex;
use thiserror::Error;

use crate::model::{CodeSegment, Judgment, PromptStyle, Role, VulnCategory};

/// The reply-format contract imposed on every prompt: the first line must be
/// exactly this header followed by the binary verdict.
pub const VERDICT_HEADER: &str = "VERDICT:";

/// Full placeholder vocabulary. Template files may use any subset; a file
/// containing any other `{{name}}` token fails to load.
pub const PLACEHOLDERS: [&str; 7] = [
    "code",
    "categories",
    "role_description",
    "peer_judgment",
    "peer_reasoning",
    "own_judgment",
    "own_reasoning",
];

const TEMPLATE_NAMES: [&str; 6] = [
    "tester-initial-basic",
    "tester-initial-cot",
    "tester-discussion",
    "developer-initial-basic",
    "developer-initial-cot",
    "developer-discussion",
];

/// Placeholders each template must contain, frozen here: changing this table
/// changes the parsing/rendering contract and is a versioned change.
fn required_placeholders(name: &str) -> Option<&'static [&'static str]> {
    match name {
        "tester-initial-basic" | "tester-initial-cot" | "developer-initial-basic"
        | "developer-initial-cot" => Some(&["code", "categories"]),
        "tester-discussion" | "developer-discussion" => {
            Some(&["code", "categories", "peer_judgment", "peer_reasoning"])
        }
        _ => None,
    }
}

fn builtin_text(name: &str) -> &'static str {
    match name {
        "tester-initial-basic" => include_str!("../templates/tester-initial-basic.txt"),
        "tester-initial-cot" => include_str!("../templates/tester-initial-cot.txt"),
        "tester-discussion" => include_str!("../templates/tester-discussion.txt"),
        "developer-initial-basic" => include_str!("../templates/developer-initial-basic.txt"),
        "developer-initial-cot" => include_str!("../templates/developer-initial-cot.txt"),
        "developer-discussion" => include_str!("../templates/developer-discussion.txt"),
        _ => unreachable!("unknown builtin template"),
    }
}

/// Role-setting text sent as the system message for every request by that role.
pub fn role_description(role: Role) -> &'static str {
    match role {
        Role::Tester => {
            "You are an experienced software tester performing a security-focused code review. \
             Your responsibility is to uncover vulnerabilities before the code ships; \
             be skeptical, concrete, and brief."
        }
        Role::Developer => {
            "You are the developer who wrote the code segment under review. \
             You know its intent and the safeguards it relies on; \
             defend sound code, concede real defects, and be concrete and brief."
        }
    }
}

/// Corrective prompt sent when a reply did not carry a parseable verdict.
pub fn format_reminder() -> &'static str {
    "Your previous reply did not follow the required format. Reply again: the first line \
     must be exactly \"VERDICT: 1\" (vulnerable) or \"VERDICT: 0\" (non-vulnerable), \
     followed by your brief reasoning."
}

/// One line per category: code plus its one-sentence gloss.
pub fn categories_text() -> String {
    VulnCategory::ALL
        .iter()
        .map(|c| format!("- {}: {}", c.code(), c.gloss()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A named template body with the placeholders it is required to bind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
    pub required_placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    /// Validates a template body against the frozen placeholder table.
    pub fn new(name: &str, text: &str) -> Result<Self, PromptError> {
        let required = required_placeholders(name).ok_or_else(|| PromptError::UnknownTemplate {
            name: name.to_string(),
        })?;
        let tokens = placeholder_tokens(text);
        for token in &tokens {
            if !PLACEHOLDERS.contains(&token.as_str()) {
                return Err(PromptError::UnknownPlaceholder {
                    template: name.to_string(),
                    placeholder: token.clone(),
                });
            }
        }
        for req in required {
            if !tokens.contains(*req) {
                return Err(PromptError::MissingPlaceholder {
                    template: name.to_string(),
                    placeholder: (*req).to_string(),
                });
            }
        }
        if let Some(stray) = stray_marker(text) {
            return Err(PromptError::MalformedTemplate {
                template: name.to_string(),
                detail: format!("stray marker near \"{stray}\""),
            });
        }
        Ok(Self {
            name: name.to_string(),
            text: text.to_string(),
            required_placeholders: required.iter().map(|s| (*s).to_string()).collect(),
        })
    }

    /// Substitutes bindings in a single pass. Substituted values are never
    /// rescanned, so braces inside code text pass through untouched.
    fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let re = placeholder_regex();
        let mut missing = None;
        let rendered = re.replace_all(&self.text, |caps: &regex::Captures<'_>| {
            let key = caps.get(1).map(|m| m.as_str()).unwrap_or_default();
            match bindings.get(key) {
                Some(value) => value.clone(),
                None => {
                    if missing.is_none() {
                        missing = Some(key.to_string());
                    }
                    String::new()
                }
            }
        });
        if let Some(placeholder) = missing {
            return Err(PromptError::UnboundPlaceholder {
                template: self.name.clone(),
                placeholder,
            });
        }
        Ok(rendered.into_owned())
    }
}

fn placeholder_regex() -> Regex {
    Regex::new(r"\{\{([a-z_]+)\}\}").expect("placeholder regex")
}

fn placeholder_tokens(text: &str) -> BTreeSet<String> {
    placeholder_regex()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

/// Finds a `{{` in the template that is not part of a well-formed token.
fn stray_marker(text: &str) -> Option<String> {
    let cleaned = placeholder_regex().replace_all(text, "");
    cleaned.find("{{").map(|pos| {
        cleaned[pos..]
            .chars()
            .take(12)
            .collect::<String>()
            .replace('\n', " ")
    })
}

/// A fully rendered prompt: role-setting system text plus the task text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system_text: String,
    pub user_text: String,
}

/// The set of templates a run renders from. Immutable after load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}

impl TemplateSet {
    /// The built-in set of 6 templates (2 roles x {initial-basic, initial-cot,
    /// discussion}).
    pub fn builtin() -> Self {
        let templates = TEMPLATE_NAMES
            .iter()
            .map(|name| {
                let t = PromptTemplate::new(name, builtin_text(name))
                    .expect("builtin templates are valid");
                ((*name).to_string(), t)
            })
            .collect();
        Self { templates }
    }

    pub fn get(&self, name: &str) -> Option<&PromptTemplate> {
        self.templates.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    fn template_for(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        self.get(name).ok_or_else(|| PromptError::UnknownTemplate {
            name: name.to_string(),
        })
    }

    /// Renders the role-setting + first task prompt for a segment.
    pub fn render_initial(
        &self,
        role: Role,
        segment: &CodeSegment,
        style: PromptStyle,
    ) -> Result<RenderedPrompt, PromptError> {
        let name = format!("{}-initial-{}", role.name(), style.file_tag());
        let template = self.template_for(&name)?;
        let bindings = base_bindings(role, segment);
        let user_text = template.render(&bindings)?;
        Ok(RenderedPrompt {
            system_text: role_description(role).to_string(),
            user_text,
        })
    }

    /// Renders the prompt that relays the peer's latest judgment and asks the
    /// role to pose a query, answer the peer's points, and restate its verdict.
    ///
    /// `own_last` is what this role said last; it is `None` on the developer's
    /// first turn, when only the tester has spoken. Whether consensus holds is
    /// the engine's decision, never prompting's — equal verdicts still render.
    pub fn render_discussion(
        &self,
        role: Role,
        segment: &CodeSegment,
        peer: &Judgment,
        own_last: Option<&Judgment>,
    ) -> Result<RenderedPrompt, PromptError> {
        let name = format!("{}-discussion", role.name());
        let template = self.template_for(&name)?;
        let mut bindings = base_bindings(role, segment);
        bindings.insert("peer_judgment", peer.verdict.to_string());
        bindings.insert("peer_reasoning", peer.reasoning.clone());
        if let Some(own) = own_last {
            bindings.insert("own_judgment", own.verdict.to_string());
            bindings.insert("own_reasoning", own.reasoning.clone());
        }
        let user_text = template.render(&bindings)?;
        Ok(RenderedPrompt {
            system_text: role_description(role).to_string(),
            user_text,
        })
    }
}

fn base_bindings<'a>(role: Role, segment: &CodeSegment) -> BTreeMap<&'a str, String> {
    let mut bindings = BTreeMap::new();
    bindings.insert("code", segment.source_text.clone());
    bindings.insert("categories", categories_text());
    bindings.insert("role_description", role_description(role).to_string());
    bindings
}

/// Loads templates from a directory of `<name>.txt` files, starting from the
/// built-in set and overriding any template whose file is present. A missing
/// path yields the built-in set unchanged.
pub fn load_templates(path: &Path) -> Result<TemplateSet, PromptError> {
    let mut set = TemplateSet::builtin();
    if !path.exists() {
        return Ok(set);
    }
    let entries = fs::read_dir(path).map_err(|e| PromptError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut seen = BTreeSet::new();
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
        .collect();
    files.sort();
    for file in files {
        let name = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        if !seen.insert(name.clone()) {
            return Err(PromptError::DuplicateTemplate { name });
        }
        let text = fs::read_to_string(&file).map_err(|e| PromptError::Io {
            path: file.display().to_string(),
            detail: e.to_string(),
        })?;
        let template = PromptTemplate::new(&name, &text)?;
        set.templates.insert(name, template);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown template name '{name}'")]
    UnknownTemplate { name: String },
    #[error("template '{template}' uses unknown placeholder '{{{{{placeholder}}}}}'")]
    UnknownPlaceholder { template: String, placeholder: String },
    #[error("template '{template}' is missing required placeholder '{{{{{placeholder}}}}}'")]
    MissingPlaceholder { template: String, placeholder: String },
    #[error("template '{template}' has no binding for placeholder '{{{{{placeholder}}}}}'")]
    UnboundPlaceholder { template: String, placeholder: String },
    #[error("template '{template}' is malformed: {detail}")]
    MalformedTemplate { template: String, detail: String },
    #[error("duplicate template name '{name}'")]
    DuplicateTemplate { name: String },
    #[error("cannot read '{path}': {detail}")]
    Io { path: String, detail: String },
}
