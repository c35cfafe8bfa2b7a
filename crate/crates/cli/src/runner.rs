//! Executes an experiment plan: every (group, segment, config) combination
//! goes through the engine, each finished transcript is appended to the
//! store as soon as it completes, and the final report is built once all
//! jobs are done.
//!
//! Up to `parallelism` discussions run concurrently; the store has a single
//! writer (the dispatching thread) fed by a channel. Resume loads the store
//! first and skips every (group, segment, approach, prompt-style) key
//! already present.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use thiserror::Error;

use consilium::backend::{BackendError, ChatBackend, ScriptedBackend};
use consilium::corpus::{load_corpus, sample_group, CorpusError};
use consilium::engine::{Engine, EngineError};
use consilium::model::{CodeSegment, RunConfig};
use consilium::prompting::{load_templates, PromptError, TemplateSet};

use crate::plan::{BackendChoice, ExperimentPlan, PlanError};
use crate::report::{build_report_doc, ReportDoc};
use crate::store::{StoreError, TranscriptRecord, TranscriptStore};

/// Result of a full run: the report over everything in the store (including
/// records from earlier interrupted runs when resuming) plus run accounting.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub doc: ReportDoc,
    pub records_written: usize,
    pub records_resumed: usize,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Templates(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("store '{0}' already has records; pass --resume to continue it or choose a new --out")]
    StoreNotEmpty(String),
    #[error("running {group}/{segment_id}")]
    Run {
        group: String,
        segment_id: String,
        source: EngineError,
    },
}

struct Job {
    group: String,
    segment: CodeSegment,
    config: RunConfig,
}

/// Builds the configured backend, failing fast on missing credentials or an
/// unreadable script before any segment runs.
pub fn make_backend(plan: &ExperimentPlan) -> Result<Box<dyn ChatBackend>, RunnerError> {
    match plan.backend {
        BackendChoice::Scripted => {
            let script = plan.script.as_ref().ok_or(PlanError::MissingScript)?;
            Ok(Box::new(ScriptedBackend::from_script_file(script)?))
        }
        BackendChoice::Live => Ok(Box::new(consilium::http::HttpBackend::from_env()?)),
    }
}

pub fn run_experiment(plan: &ExperimentPlan, resume: bool) -> Result<ExperimentOutcome, RunnerError> {
    plan.validate()?;
    let sweep = plan.sweep()?;
    let backend = make_backend(plan)?;
    let templates = match &plan.templates {
        Some(path) => load_templates(path)?,
        None => TemplateSet::builtin(),
    };
    let engine = Engine::new(templates);

    let corpus = load_corpus(&plan.corpus)?;
    let mut groups = Vec::new();
    for spec in &plan.groups {
        groups.push((spec.name.clone(), sample_group(&corpus, spec)?));
    }

    let store = TranscriptStore::new(plan.store_path());
    let (mut records, skipped_lines) = if resume {
        store.load().map_or_else(
            |_| (Vec::new(), 0u64),
            |l| {
                let skipped = l.skipped.len() as u64;
                (l.records, skipped)
            },
        )
    } else {
        if store.exists_non_empty() {
            return Err(RunnerError::StoreNotEmpty(
                store.path().display().to_string(),
            ));
        }
        (Vec::new(), 0)
    };
    let records_resumed = records.len();
    let existing: std::collections::BTreeSet<_> =
        records.iter().map(TranscriptRecord::key).collect();

    let mut jobs = Vec::new();
    for (group, segments) in &groups {
        for config in &sweep {
            for segment in segments {
                let key = crate::store::RunKey {
                    group: group.clone(),
                    segment_id: segment.id.clone(),
                    approach: config.approach,
                    prompt_style: config.prompt_style,
                };
                if !existing.contains(&key) {
                    jobs.push(Job {
                        group: group.clone(),
                        segment: segment.clone(),
                        config: config.clone(),
                    });
                }
            }
        }
    }

    let mut appender = store.appender()?;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<Result<TranscriptRecord, RunnerError>>();
    let mut first_error: Option<RunnerError> = None;
    let mut written = 0usize;

    let workers = plan.parallelism.min(jobs.len()).max(1);
    thread::scope(|scope| {
        let jobs = &jobs;
        let next = &next;
        let stop = &stop;
        let engine = &engine;
        let backend = backend.as_ref();
        for _ in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || {
                loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = jobs.get(i) else { break };
                    let result = run_job(engine, backend, job);
                    if tx.send(result).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);

        // Single-writer discipline: only this thread touches the store.
        for message in rx {
            match message {
                Ok(record) => {
                    if let Err(e) = appender.append(&record) {
                        stop.store(true, Ordering::SeqCst);
                        first_error.get_or_insert(RunnerError::Store(e));
                    } else {
                        records.push(record);
                        written += 1;
                    }
                }
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    first_error.get_or_insert(e);
                }
            }
        }
    });

    if let Some(error) = first_error {
        return Err(error);
    }

    let doc = build_report_doc(&records, skipped_lines);
    Ok(ExperimentOutcome {
        doc,
        records_written: written,
        records_resumed,
    })
}

fn run_job(
    engine: &Engine,
    backend: &dyn ChatBackend,
    job: &Job,
) -> Result<TranscriptRecord, RunnerError> {
    match engine.run(&job.segment, &job.config, backend) {
        Ok(transcript) => Ok(TranscriptRecord::from_transcript(
            &job.group,
            &job.segment,
            transcript,
            job.config.clone(),
        )),
        Err(EngineError::Unparseable { turns, .. }) => Ok(TranscriptRecord::unparseable(
            &job.group,
            &job.segment,
            turns,
            job.config.clone(),
        )),
        Err(source) => Err(RunnerError::Run {
            group: job.group.clone(),
            segment_id: job.segment.id.clone(),
            source,
        }),
    }
}
