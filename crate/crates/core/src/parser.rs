//! Extracts a [`Judgment`] from raw model text.
//!
//! The primary rule is strict: the first non-blank line must be
//! `VERDICT: <0|1>` (case-sensitive, flexible inner whitespace), and the
//! remainder is the reasoning. Only when that fails do the fallback rules
//! apply. The fallback table is frozen here — changing it changes reported
//! accuracy and is a versioned change:
//!
//! 1. Late header: any case-insensitive `verdict: <0|1>` occurrence.
//! 2. Keyword adjacency: a standalone `0`/`1` within 30 characters of
//!    "vulnerable", "not vulnerable", or "non-vulnerable" (either order).
//!
//! Signals from both rules are pooled and the one whose digit occurs last in
//! the text wins; on fallback the reasoning is the whole reply. Parsing is
//! total and pure: it never fails, the same input always yields the same
//! outcome, and failure is encoded in the returned [`ParseOutcome`].

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{Judgment, Verdict};

/// Which rule produced the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseRule {
    StrictHeader,
    FallbackPattern,
    Failed,
}

/// Result of parsing one reply. `judgment` is absent iff `rule_used` is
/// [`ParseRule::Failed`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub judgment: Option<Judgment>,
    pub rule_used: ParseRule,
    pub diagnostics: String,
}

impl ParseOutcome {
    pub fn failed(&self) -> bool {
        self.rule_used == ParseRule::Failed
    }
}

const ADJACENCY_WINDOW: usize = 30;

fn strict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^VERDICT:\s*([01])$").expect("strict header regex"))
}

fn late_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bverdict:\s*([01])\b").expect("late header regex"))
}

fn standalone_digit_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[01]\b").expect("digit regex"))
}

fn keyword_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:non[\s-]?vulnerable|not\s+vulnerable|vulnerable)\b")
            .expect("keyword regex")
    })
}

/// Parses a verdict and reasoning out of a raw reply. Total and pure.
pub fn parse_judgment(raw_text: &str) -> ParseOutcome {
    if let Some(outcome) = parse_strict(raw_text) {
        return outcome;
    }
    if let Some(outcome) = parse_fallback(raw_text) {
        return outcome;
    }
    ParseOutcome {
        judgment: None,
        rule_used: ParseRule::Failed,
        diagnostics: "no verdict pattern found (expected first line 'VERDICT: <0|1>')".to_string(),
    }
}

fn parse_strict(raw_text: &str) -> Option<ParseOutcome> {
    let mut offset = 0usize;
    for line in raw_text.split('\n') {
        let line_end = offset + line.len();
        if !line.trim().is_empty() {
            let caps = strict_re().captures(line.trim())?;
            let verdict = digit_to_verdict(&caps[1]);
            let remainder = raw_text
                .get(line_end..)
                .unwrap_or_default()
                .trim()
                .to_string();
            return Some(ParseOutcome {
                judgment: Some(Judgment::new(verdict, remainder)),
                rule_used: ParseRule::StrictHeader,
                diagnostics: "strict header on first non-blank line".to_string(),
            });
        }
        offset = line_end + 1;
    }
    None
}

#[derive(Debug, Clone, Copy)]
struct Signal {
    digit_pos: usize,
    verdict: Verdict,
    kind: &'static str,
}

fn parse_fallback(raw_text: &str) -> Option<ParseOutcome> {
    let mut signals: Vec<Signal> = Vec::new();

    for caps in late_header_re().captures_iter(raw_text) {
        let digit = caps.get(1).expect("header digit group");
        signals.push(Signal {
            digit_pos: digit.start(),
            verdict: digit_to_verdict(digit.as_str()),
            kind: "late verdict header",
        });
    }

    let keywords: Vec<(usize, usize)> = keyword_re()
        .find_iter(raw_text)
        .map(|m| (m.start(), m.end()))
        .collect();
    if !keywords.is_empty() {
        for m in standalone_digit_re().find_iter(raw_text) {
            let adjacent = keywords.iter().any(|&(ks, ke)| {
                let gap = if m.start() >= ke {
                    m.start() - ke
                } else if ks >= m.end() {
                    ks - m.end()
                } else {
                    0
                };
                gap <= ADJACENCY_WINDOW
            });
            if adjacent {
                signals.push(Signal {
                    digit_pos: m.start(),
                    verdict: digit_to_verdict(m.as_str()),
                    kind: "standalone digit adjacent to vulnerability keyword",
                });
            }
        }
    }

    // Last signal in the text wins; on a positional tie the header form is
    // the more explicit one.
    signals.sort_by_key(|s| (s.digit_pos, s.kind == "late verdict header"));
    let winner = signals.last()?;
    Some(ParseOutcome {
        judgment: Some(Judgment::new(winner.verdict, raw_text.trim().to_string())),
        rule_used: ParseRule::FallbackPattern,
        diagnostics: format!("{} at byte {}", winner.kind, winner.digit_pos),
    })
}

fn digit_to_verdict(digit: &str) -> Verdict {
    match digit {
        "0" => Verdict::NonVulnerable,
        "1" => Verdict::Vulnerable,
        other => unreachable!("regex only captures 0 or 1, got {other}"),
    }
}
