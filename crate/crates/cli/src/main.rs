//! The consilium CLI: run experiment sweeps, rebuild reports from transcript
//! stores, validate corpora, and check the bundled reference results table.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use consilium::corpus::load_corpus;
use consilium::evalkit::{
    improvement_summary, reference_results, report_from_reference, table1_consistency,
    REFERENCE_IMPROVEMENT, TABLE_TOLERANCE,
};
use consilium::model::{Approach, VulnCategory};
use consilium_cli::plan::BackendChoice;
use consilium_cli::{
    render_text, report_from_store, run_experiment, write_outputs, ExperimentPlan, TranscriptStore,
};

#[derive(Parser)]
#[command(
    name = "consilium",
    about = "Two-persona LLM code-review discussions for vulnerability detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment plan and write transcripts.jsonl, report.json, report.txt.
    Run {
        /// JSON plan file (corpus, groups, approaches, prompt_styles, backend, out_dir).
        #[arg(long)]
        config: PathBuf,
        /// Override the plan's backend.
        #[arg(long, value_parser = parse_backend)]
        backend: Option<BackendChoice>,
        /// Override the plan's scripted-backend script path.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Override the plan's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the plan's number of concurrent discussions.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Continue an interrupted run, skipping pairs already in the store.
        #[arg(long)]
        resume: bool,
    },
    /// Recompute the report from a transcript store (the source of truth).
    Report {
        /// Directory holding transcripts.jsonl; report files are written here.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Load a corpus file and print its per-category counts.
    ValidateCorpus {
        /// JSONL corpus file.
        path: PathBuf,
    },
    /// Check the bundled reference results table: internal P/R/F1 consistency
    /// plus the multi-vs-single improvement summary.
    CheckTable1,
}

fn parse_backend(s: &str) -> Result<BackendChoice, String> {
    match s {
        "live" => Ok(BackendChoice::Live),
        "scripted" => Ok(BackendChoice::Scripted),
        other => Err(format!("unknown backend '{other}' (expected live or scripted)")),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            backend,
            script,
            out,
            parallelism,
            resume,
        } => {
            let mut plan = ExperimentPlan::from_file(&config)
                .with_context(|| format!("loading plan {}", config.display()))?;
            if let Some(backend) = backend {
                plan.backend = backend;
            }
            if let Some(script) = script {
                plan.script = Some(script);
            }
            if let Some(out) = out {
                plan.out_dir = out;
            }
            if let Some(parallelism) = parallelism {
                plan.parallelism = parallelism;
            }
            let outcome = run_experiment(&plan, resume)?;
            write_outputs(&plan.out_dir, &outcome.doc)?;
            print!("{}", render_text(&outcome.doc));
            println!(
                "wrote {} new transcripts ({} resumed) to {}",
                outcome.records_written,
                outcome.records_resumed,
                plan.store_path().display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { out } => {
            let store = TranscriptStore::new(out.join("transcripts.jsonl"));
            let doc = report_from_store(&store)?;
            write_outputs(&out, &doc)?;
            print!("{}", render_text(&doc));
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateCorpus { path } => {
            let corpus = load_corpus(&path)?;
            println!("{}: {} segments", path.display(), corpus.len());
            println!("{:<10} {:>11} {:>15}", "category", "vulnerable", "non-vulnerable");
            for category in VulnCategory::ALL {
                println!(
                    "{:<10} {:>11} {:>15}",
                    category.code(),
                    corpus.count(category, true),
                    corpus.count(category, false)
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckTable1 => {
            let fixture = reference_results();
            let violations = table1_consistency(&fixture)?;
            println!(
                "reference results: {} triples, {} consistency violations (tolerance {})",
                fixture.len(),
                violations.len(),
                TABLE_TOLERANCE
            );
            for v in &violations {
                println!(
                    "  {} {} {} {}: table f1 {:.3}, harmonic mean {:.3} (off by {:.4})",
                    v.group, v.category, v.approach, v.prompt_style, v.actual_f1, v.expected_f1, v.deviation
                );
            }
            let multi = report_from_reference(&fixture, Approach::MultiRole);
            let single = report_from_reference(&fixture, Approach::SingleRole);
            let improvement = improvement_summary(&multi, &single)?;
            let (ref_p, ref_r, ref_f1) = REFERENCE_IMPROVEMENT;
            println!("improvement of multi-role over single-role (mean relative increase):");
            for (name, m, reference) in [
                ("precision", improvement.precision, ref_p),
                ("recall", improvement.recall, ref_r),
                ("f1", improvement.f1, ref_f1),
            ] {
                let pct = m.mean_pct.expect("reference cells are all defined");
                println!(
                    "  {name:<10} {pct:+.2}% over {} cells (published {reference:.2}%, deviation {:.2}pp)",
                    m.cells_used,
                    (pct - reference).abs()
                );
            }
            if violations.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
