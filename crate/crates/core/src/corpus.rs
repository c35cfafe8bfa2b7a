//! Loads labeled code-segment datasets and constructs evaluation groups with
//! specified vulnerable/non-vulnerable compositions.
//!
//! Corpus files are JSONL, one object per line:
//! `{"id": string, "code": string, "label": 0|1, "category": "FC"|"AE"|"AU"|"PU"}`.
//! Group sampling is without replacement, seeded, shuffle-then-take; equal
//! (corpus, spec) inputs always produce the same sequence.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CodeSegment, VulnCategory};

/// An immutable loaded dataset with per-(category, label) tallies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    segments: Vec<CodeSegment>,
    counts: BTreeMap<(VulnCategory, bool), usize>,
}

impl Corpus {
    pub fn segments(&self) -> &[CodeSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn counts(&self) -> &BTreeMap<(VulnCategory, bool), usize> {
        &self.counts
    }

    pub fn count(&self, category: VulnCategory, label: bool) -> usize {
        self.counts.get(&(category, label)).copied().unwrap_or(0)
    }

    /// Full recount from the segments; always equals `counts()`.
    pub fn recount(&self) -> BTreeMap<(VulnCategory, bool), usize> {
        tally(&self.segments)
    }
}

fn tally(segments: &[CodeSegment]) -> BTreeMap<(VulnCategory, bool), usize> {
    let mut counts = BTreeMap::new();
    for s in segments {
        *counts.entry((s.category, s.label)).or_insert(0) += 1;
    }
    counts
}

/// A requested group composition over one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub vulnerable_count: usize,
    pub non_vulnerable_count: usize,
    pub category: VulnCategory,
    #[serde(default)]
    pub seed: u64,
}

/// Raw JSONL record shape.
#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    code: String,
    label: u8,
    category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("cannot read '{path}': {detail}")]
    Io { path: String, detail: String },
    #[error("line {line}: malformed record: {detail}")]
    MalformedRecord { line: usize, detail: String },
    #[error("line {line}: unknown category '{value}'")]
    UnknownCategory { line: usize, value: String },
    #[error("line {line}: label must be 0 or 1, got {value}")]
    InvalidLabel { line: usize, value: u8 },
    #[error("line {line}: duplicate id '{id}'")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: segment '{id}' has empty code")]
    EmptyCode { line: usize, id: String },
    #[error(
        "group '{group}': requested {requested} {category} segments with vulnerable={vulnerable}, corpus has {available}"
    )]
    InsufficientSegments {
        group: String,
        category: VulnCategory,
        vulnerable: bool,
        requested: usize,
        available: usize,
    },
}

/// Loads a JSONL corpus file, rejecting malformed records, unknown
/// categories, and duplicate ids with their line numbers.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    load_corpus_reader(BufReader::new(file))
}

/// Same as [`load_corpus`] over any reader; line numbers are 1-based.
pub fn load_corpus_reader<R: Read>(reader: BufReader<R>) -> Result<Corpus, CorpusError> {
    let mut segments = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: format!("line {line_no}"),
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                detail: e.to_string(),
            })?;
        if raw.label > 1 {
            return Err(CorpusError::InvalidLabel {
                line: line_no,
                value: raw.label,
            });
        }
        let category: VulnCategory =
            raw.category
                .parse()
                .map_err(|_| CorpusError::UnknownCategory {
                    line: line_no,
                    value: raw.category.clone(),
                })?;
        if !ids.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: raw.id,
            });
        }
        let segment = CodeSegment::new(raw.id.clone(), raw.code, raw.label == 1, category)
            .map_err(|_| CorpusError::EmptyCode {
                line: line_no,
                id: raw.id,
            })?;
        segments.push(segment);
    }
    let counts = tally(&segments);
    Ok(Corpus { segments, counts })
}

/// Draws exactly the requested label mix from the spec's category:
/// the category pool is shuffled with a ChaCha8 stream seeded by `spec.seed`,
/// then taken front to back until both quotas are met. Without replacement;
/// deterministic for equal (corpus order, spec).
pub fn sample_group(corpus: &Corpus, spec: &GroupSpec) -> Result<Vec<CodeSegment>, CorpusError> {
    for (vulnerable, requested) in [
        (true, spec.vulnerable_count),
        (false, spec.non_vulnerable_count),
    ] {
        let available = corpus.count(spec.category, vulnerable);
        if requested > available {
            return Err(CorpusError::InsufficientSegments {
                group: spec.name.clone(),
                category: spec.category,
                vulnerable,
                requested,
                available,
            });
        }
    }

    let mut pool: Vec<&CodeSegment> = corpus
        .segments
        .iter()
        .filter(|s| s.category == spec.category)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pool.shuffle(&mut rng);

    let mut need_vulnerable = spec.vulnerable_count;
    let mut need_clean = spec.non_vulnerable_count;
    let mut group = Vec::with_capacity(need_vulnerable + need_clean);
    for segment in pool {
        let need = if segment.label {
            &mut need_vulnerable
        } else {
            &mut need_clean
        };
        if *need > 0 {
            *need -= 1;
            group.push(segment.clone());
        }
        if need_vulnerable == 0 && need_clean == 0 {
            break;
        }
    }
    Ok(group)
}
