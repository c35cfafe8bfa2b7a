//! The JSONL transcript store: one record per completed discussion, appended
//! as soon as it finishes. Transcripts are the persisted ground truth —
//! metrics are always recomputed from them.
//!
//! A record line carries the transcript fields (snake_case), the run config
//! under `config`, and the evaluation metadata (`group`, `label`,
//! `category`) needed to rebuild report cells from the store alone.
//! `final_judgment` is null for runs that never produced a parseable
//! judgment; those count as unparseable in reports and are skipped on resume
//! like any other completed record.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use consilium::model::{
    Approach, CodeSegment, DiscussionTranscript, Judgment, PromptStyle, RunConfig, Turn, Verdict,
    VulnCategory,
};

/// One persisted line of the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub group: String,
    pub label: bool,
    pub category: VulnCategory,
    pub segment_id: String,
    pub turns: Vec<Turn>,
    pub rounds_used: u32,
    pub consensus_reached: bool,
    pub final_judgment: Option<Judgment>,
    pub config: RunConfig,
}

impl TranscriptRecord {
    pub fn from_transcript(
        group: &str,
        segment: &CodeSegment,
        transcript: DiscussionTranscript,
        config: RunConfig,
    ) -> Self {
        Self {
            group: group.to_string(),
            label: segment.label,
            category: segment.category,
            segment_id: transcript.segment_id,
            turns: transcript.turns,
            rounds_used: transcript.rounds_used,
            consensus_reached: transcript.consensus_reached,
            final_judgment: Some(transcript.final_judgment),
            config,
        }
    }

    /// A run whose every reply failed to parse: excluded from P/R/F1 but
    /// recorded so the segment is counted and never re-run on resume.
    pub fn unparseable(
        group: &str,
        segment: &CodeSegment,
        turns: Vec<Turn>,
        config: RunConfig,
    ) -> Self {
        Self {
            group: group.to_string(),
            label: segment.label,
            category: segment.category,
            segment_id: segment.id.clone(),
            turns,
            rounds_used: 1,
            consensus_reached: false,
            final_judgment: None,
            config,
        }
    }

    pub fn verdict(&self) -> Option<Verdict> {
        self.final_judgment.as_ref().map(|j| j.verdict)
    }

    pub fn key(&self) -> RunKey {
        RunKey {
            group: self.group.clone(),
            segment_id: self.segment_id.clone(),
            approach: self.config.approach,
            prompt_style: self.config.prompt_style,
        }
    }

    /// Token totals over all turns.
    pub fn usage(&self) -> (u64, u64) {
        self.turns.iter().fold((0, 0), |(p, c), t| {
            (p + t.prompt_tokens, c + t.completion_tokens)
        })
    }
}

/// Identity of one (group, segment, approach, prompt style) run; a record
/// with this key present in the store is skipped on resume.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub group: String,
    pub segment_id: String,
    pub approach: Approach,
    pub prompt_style: PromptStyle,
}

/// Store contents, with corrupt lines skipped and counted.
#[derive(Debug, Default)]
pub struct LoadedStore {
    pub records: Vec<TranscriptRecord>,
    pub skipped: Vec<(usize, String)>,
}

impl LoadedStore {
    pub fn keys(&self) -> BTreeSet<RunKey> {
        self.records.iter().map(TranscriptRecord::key).collect()
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot open store '{path}': {detail}")]
    Open { path: String, detail: String },
    #[error("cannot write store '{path}': {detail}")]
    Write { path: String, detail: String },
}

/// Append/load access to one `transcripts.jsonl` file.
#[derive(Debug, Clone)]
pub struct TranscriptStore {
    path: PathBuf,
}

impl TranscriptStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn exists_non_empty(&self) -> bool {
        std::fs::metadata(&self.path).map(|m| m.len() > 0).unwrap_or(false)
    }

    /// Opens the file for appending. One appender must be the only writer.
    pub fn appender(&self) -> Result<StoreAppender, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| StoreError::Open {
                path: self.path.display().to_string(),
                detail: e.to_string(),
            })?;
        Ok(StoreAppender {
            path: self.path.clone(),
            writer: BufWriter::new(file),
        })
    }

    /// Reads all records; corrupt lines (bad JSON or schema) are skipped and
    /// reported with their 1-based line numbers.
    pub fn load(&self) -> Result<LoadedStore, StoreError> {
        let file = File::open(&self.path).map_err(|e| StoreError::Open {
            path: self.path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut loaded = LoadedStore::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    loaded.skipped.push((line_no, e.to_string()));
                    continue;
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<TranscriptRecord>(&line) {
                Ok(record) => loaded.records.push(record),
                Err(e) => loaded.skipped.push((line_no, e.to_string())),
            }
        }
        Ok(loaded)
    }
}

/// Single-writer append handle; every record is flushed on write so an
/// interrupted run can resume from what reached disk.
#[derive(Debug)]
pub struct StoreAppender {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl StoreAppender {
    pub fn append(&mut self, record: &TranscriptRecord) -> Result<(), StoreError> {
        let line = serde_json::to_string(record).map_err(|e| StoreError::Write {
            path: self.path.display().to_string(),
            detail: e.to_string(),
        })?;
        writeln!(self.writer, "{line}").map_err(|e| StoreError::Write {
            path: self.path.display().to_string(),
            detail: e.to_string(),
        })?;
        self.writer.flush().map_err(|e| StoreError::Write {
            path: self.path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use consilium::model::{Role, Stage};

    fn record(segment_id: &str, approach: Approach) -> TranscriptRecord {
        let segment = CodeSegment::new(segment_id, "x = 1;", true, VulnCategory::AE).unwrap();
        let transcript = DiscussionTranscript {
            segment_id: segment_id.to_string(),
            turns: vec![Turn {
                index: 0,
                role: Role::Tester,
                stage: Stage::Initialization,
                raw_text: "VERDICT: 1\nr".into(),
                judgment: Some(Judgment::new(Verdict::Vulnerable, "r")),
                prompt_tokens: 10,
                completion_tokens: 3,
                usage_estimated: false,
            }],
            rounds_used: 1,
            consensus_reached: true,
            final_judgment: Judgment::new(Verdict::Vulnerable, "r"),
        };
        TranscriptRecord::from_transcript(
            "g1",
            &segment,
            transcript,
            RunConfig::new(approach, PromptStyle::Basic),
        )
    }

    #[test]
    fn append_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = TranscriptStore::new(dir.path().join("t.jsonl"));
        let mut appender = store.appender().unwrap();
        let a = record("s1", Approach::SingleRole);
        let b = record("s2", Approach::MultiRole);
        appender.append(&a).unwrap();
        appender.append(&b).unwrap();
        drop(appender);
        let loaded = store.load().unwrap();
        assert_eq!(loaded.records, vec![a, b]);
        assert!(loaded.skipped.is_empty());
    }

    #[test]
    fn store_line_shape_is_stable() {
        let a = record("s1", Approach::SingleRole);
        let line = serde_json::to_string(&a).unwrap();
        let value: serde_json::Value = serde_json::from_str(&line).unwrap();
        for key in [
            "group",
            "label",
            "category",
            "segment_id",
            "turns",
            "rounds_used",
            "consensus_reached",
            "final_judgment",
            "config",
        ] {
            assert!(value.get(key).is_some(), "missing key {key}");
        }
        assert_eq!(value["config"]["max_response_tokens"], 120);
        assert_eq!(value["turns"][0]["judgment"]["verdict"], 1);
    }

    #[test]
    fn corrupt_lines_are_skipped_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let store = TranscriptStore::new(&path);
        let mut appender = store.appender().unwrap();
        appender.append(&record("s1", Approach::SingleRole)).unwrap();
        drop(appender);
        // Inject corruption between two good lines.
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.push_str("{broken json\n");
        std::fs::write(&path, &content).unwrap();
        let mut appender = store.appender().unwrap();
        appender.append(&record("s2", Approach::SingleRole)).unwrap();
        drop(appender);

        let loaded = store.load().unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.skipped.len(), 1);
        assert_eq!(loaded.skipped[0].0, 2);
    }

    #[test]
    fn keys_identify_runs_for_resume() {
        let a = record("s1", Approach::SingleRole);
        let b = record("s1", Approach::MultiRole);
        assert_ne!(a.key(), b.key());
        let mut set = BTreeSet::new();
        set.insert(a.key());
        assert!(set.contains(&a.key()));
        assert!(!set.contains(&b.key()));
    }

    #[test]
    fn unparseable_record_has_null_final_judgment() {
        let segment = CodeSegment::new("s9", "y;", false, VulnCategory::PU).unwrap();
        let r = TranscriptRecord::unparseable(
            "g1",
            &segment,
            vec![],
            RunConfig::new(Approach::MultiRole, PromptStyle::Basic),
        );
        assert_eq!(r.verdict(), None);
        let line = serde_json::to_string(&r).unwrap();
        let value: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(value["final_judgment"].is_null());
    }
}
