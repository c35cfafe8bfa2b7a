//! Rebuilds metrics from transcript records and renders them as JSON plus an
//! aligned plain-text table (groups x categories x approach x prompt style).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use consilium::backend::UsageTotals;
use consilium::evalkit::{
    confusion, improvement_summary, CellKey, CellStats, ImprovementSummary, MetricsReport,
};
use consilium::model::{Approach, PromptStyle, Verdict, VulnCategory};

use crate::store::{StoreError, TranscriptRecord, TranscriptStore};

/// Everything a run reports: the cell metrics plus the cross-approach
/// summaries, serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub cells: MetricsReport,
    pub improvement: Option<ImprovementSummary>,
    /// Total multi-role tokens over total single-role tokens, when both
    /// approaches are present: the cost of the discussion.
    pub token_ratio_multi_over_single: Option<f64>,
    pub unparseable_total: u64,
    pub skipped_lines: u64,
}

/// Aggregates records into per-cell metrics. Order-independent: any
/// permutation of the records yields the same report.
pub fn report_from_records(records: &[TranscriptRecord]) -> MetricsReport {
    let mut outcomes: BTreeMap<CellKey, Vec<(bool, Option<Verdict>)>> = BTreeMap::new();
    let mut usage: BTreeMap<CellKey, UsageTotals> = BTreeMap::new();
    for record in records {
        let key = CellKey {
            group: record.group.clone(),
            category: record.category,
            approach: record.config.approach,
            prompt_style: record.config.prompt_style,
        };
        outcomes
            .entry(key.clone())
            .or_default()
            .push((record.label, record.verdict()));
        let (p, c) = record.usage();
        usage.entry(key).or_default().add(p, c);
    }
    let cells = outcomes
        .into_iter()
        .map(|(key, outcomes)| {
            let totals = usage.get(&key).copied().unwrap_or_default();
            (key.clone(), CellStats::from_counts(confusion(outcomes), totals))
        })
        .collect();
    MetricsReport { cells }
}

/// Builds the full report document from records.
pub fn build_report_doc(records: &[TranscriptRecord], skipped_lines: u64) -> ReportDoc {
    let report = report_from_records(records);
    let multi = report.filter_approach(Approach::MultiRole);
    let single = report.filter_approach(Approach::SingleRole);
    let improvement = if !multi.cells.is_empty() && !single.cells.is_empty() {
        improvement_summary(&multi, &single).ok()
    } else {
        None
    };
    let token_ratio = {
        let m = multi.total_usage().total_tokens;
        let s = single.total_usage().total_tokens;
        if m > 0 && s > 0 {
            Some(m as f64 / s as f64)
        } else {
            None
        }
    };
    let unparseable_total = report.total_unparseable();
    ReportDoc {
        cells: report,
        improvement,
        token_ratio_multi_over_single: token_ratio,
        unparseable_total,
        skipped_lines,
    }
}

/// Recomputes the report from the store alone (transcripts are the source of
/// truth). Corrupt lines are skipped and counted.
pub fn report_from_store(store: &TranscriptStore) -> Result<ReportDoc, StoreError> {
    let loaded = store.load()?;
    for (line, detail) in &loaded.skipped {
        log::warn!("skipping corrupt store line {line}: {detail}");
    }
    Ok(build_report_doc(&loaded.records, loaded.skipped.len() as u64))
}

/// Writes `report.json` and `report.txt` next to the store.
pub fn write_outputs(out_dir: &Path, doc: &ReportDoc) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(doc).expect("report serializes");
    std::fs::write(out_dir.join("report.json"), json + "\n")?;
    std::fs::write(out_dir.join("report.txt"), render_text(doc))?;
    Ok(())
}

fn fmt_metric(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.3}"),
        None => "undef".to_string(),
    }
}

fn fmt_improvement(name: &str, m: &consilium::evalkit::MetricImprovement) -> String {
    match m.mean_pct {
        Some(pct) => format!(
            "  {name:<10} {pct:+.2}% (over {} cells, {} skipped)",
            m.cells_used, m.cells_skipped
        ),
        None => format!("  {name:<10} undefined ({} cells skipped)", m.cells_skipped),
    }
}

/// Renders the aligned table plus the summary block.
pub fn render_text(doc: &ReportDoc) -> String {
    let report = &doc.cells;
    let mut rows: Vec<(String, VulnCategory)> = report
        .cells
        .keys()
        .map(|k| (k.group.clone(), k.category))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    rows.sort();

    let variants = [
        (Approach::SingleRole, PromptStyle::Basic, "s-basic"),
        (Approach::SingleRole, PromptStyle::ChainOfThought, "s-cot"),
        (Approach::MultiRole, PromptStyle::Basic, "m-basic"),
        (Approach::MultiRole, PromptStyle::ChainOfThought, "m-cot"),
    ];

    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<4} | {:^31} | {:^31} | {:^31}\n",
        "group", "cat", "precision", "recall", "f1"
    ));
    out.push_str(&format!("{:<10} {:<4} |", "", ""));
    for _ in 0..3 {
        for (_, _, label) in &variants {
            out.push_str(&format!(" {label:>7}"));
        }
        out.push_str(" |");
    }
    out.push('\n');
    out.push_str(&"-".repeat(16 + 3 * 34));
    out.push('\n');

    for (group, category) in &rows {
        out.push_str(&format!("{group:<10} {:<4} |", category.code()));
        for metric in 0..3 {
            for (approach, style, _) in &variants {
                let key = CellKey {
                    group: group.clone(),
                    category: *category,
                    approach: *approach,
                    prompt_style: *style,
                };
                let text = match report.cells.get(&key) {
                    None => "-".to_string(),
                    Some(stats) => fmt_metric(match metric {
                        0 => stats.precision,
                        1 => stats.recall,
                        _ => stats.f1,
                    }),
                };
                out.push_str(&format!(" {text:>7}"));
            }
            out.push_str(" |");
        }
        out.push('\n');
    }

    out.push('\n');
    for (approach, label) in [
        (Approach::SingleRole, "single-role"),
        (Approach::MultiRole, "multi-role"),
    ] {
        let sub = report.filter_approach(approach);
        if sub.cells.is_empty() {
            continue;
        }
        let usage = sub.total_usage();
        out.push_str(&format!(
            "{label} tokens: prompt {}, completion {}, total {}\n",
            usage.prompt_tokens, usage.completion_tokens, usage.total_tokens
        ));
    }
    if let Some(ratio) = doc.token_ratio_multi_over_single {
        out.push_str(&format!(
            "token ratio multi/single: {ratio:.2} ({:+.0}% increase)\n",
            (ratio - 1.0) * 100.0
        ));
    }
    out.push_str(&format!("unparseable runs: {}\n", doc.unparseable_total));
    if doc.skipped_lines > 0 {
        out.push_str(&format!("corrupt store lines skipped: {}\n", doc.skipped_lines));
    }
    if let Some(improvement) = &doc.improvement {
        out.push_str("improvement of multi-role over single-role (mean relative increase):\n");
        out.push_str(&fmt_improvement("precision:", &improvement.precision));
        out.push('\n');
        out.push_str(&fmt_improvement("recall:", &improvement.recall));
        out.push('\n');
        out.push_str(&fmt_improvement("f1:", &improvement.f1));
        out.push('\n');
    }
    out
}
