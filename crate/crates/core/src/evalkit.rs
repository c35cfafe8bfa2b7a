//! Computes precision, recall, F1, and token totals per experiment cell, and
//! checks the bundled reference results table for internal consistency.
//!
//! Division by zero never yields a silent 0: undefined metrics are `None`
//! and are skipped (with a count) wherever cells are averaged. Unparseable
//! segments are excluded from the four confusion cells but always tallied
//! alongside them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::UsageTotals;
use crate::model::{Approach, PromptStyle, Verdict, VulnCategory};

/// Absolute tolerance for comparisons against 3-decimal published values
/// (half an ULP of the rounding, doubled for the P/R rounding already baked
/// into a published F1).
pub const TABLE_TOLERANCE: f64 = 0.002;

/// Published headline improvement percentages (precision, recall, f1) used as
/// the reference point by `check-table1`.
pub const REFERENCE_IMPROVEMENT: (f64, f64, f64) = (13.48, 18.25, 16.13);

/// Standard confusion counts plus the unparseable tally kept outside them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
    pub unparseable: u64,
}

impl ConfusionCounts {
    /// Sum of all five cells: the number of segments evaluated.
    pub fn total(&self) -> u64 {
        self.true_positive
            + self.false_positive
            + self.true_negative
            + self.false_negative
            + self.unparseable
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_positive += other.true_positive;
        self.false_positive += other.false_positive;
        self.true_negative += other.true_negative;
        self.false_negative += other.false_negative;
        self.unparseable += other.unparseable;
    }
}

/// Counts outcomes of (ground truth, predicted verdict or unparseable).
pub fn confusion<I>(outcomes: I) -> ConfusionCounts
where
    I: IntoIterator<Item = (bool, Option<Verdict>)>,
{
    let mut counts = ConfusionCounts::default();
    for (truth, predicted) in outcomes {
        match predicted {
            None => counts.unparseable += 1,
            Some(v) => match (truth, v.is_vulnerable()) {
                (true, true) => counts.true_positive += 1,
                (false, true) => counts.false_positive += 1,
                (false, false) => counts.true_negative += 1,
                (true, false) => counts.false_negative += 1,
            },
        }
    }
    counts
}

/// Precision/recall/F1 with undefined values encoded as `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// precision = tp/(tp+fp), recall = tp/(tp+fn), f1 = 2PR/(P+R); any zero
/// denominator yields `None` for that metric.
pub fn prf(counts: &ConfusionCounts) -> PrfMetrics {
    let tp = counts.true_positive as f64;
    let fp = counts.false_positive as f64;
    let fn_ = counts.false_negative as f64;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    PrfMetrics {
        precision,
        recall,
        f1,
    }
}

fn ratio(numerator: f64, denominator: f64) -> Option<f64> {
    if denominator > 0.0 {
        Some(numerator / denominator)
    } else {
        None
    }
}

/// Key of one experiment cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub group: String,
    pub category: VulnCategory,
    pub approach: Approach,
    pub prompt_style: PromptStyle,
}

/// Metrics, confusion counts, and token totals for one cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub counts: ConfusionCounts,
    pub usage: UsageTotals,
}

impl CellStats {
    pub fn from_counts(counts: ConfusionCounts, usage: UsageTotals) -> Self {
        let metrics = prf(&counts);
        Self {
            precision: metrics.precision,
            recall: metrics.recall,
            f1: metrics.f1,
            counts,
            usage,
        }
    }

    pub fn metrics(&self) -> PrfMetrics {
        PrfMetrics {
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }
}

/// Per-cell metrics for a whole experiment. Serializes as a sorted list of
/// flat cell entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub cells: BTreeMap<CellKey, CellStats>,
}

#[derive(Serialize, Deserialize)]
struct CellEntry {
    #[serde(flatten)]
    key: CellKey,
    #[serde(flatten)]
    stats: CellStats,
}

impl Serialize for MetricsReport {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.cells.iter().map(|(key, stats)| CellEntry {
            key: key.clone(),
            stats: stats.clone(),
        }))
    }
}

impl<'de> Deserialize<'de> for MetricsReport {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let entries = Vec::<CellEntry>::deserialize(deserializer)?;
        Ok(Self {
            cells: entries.into_iter().map(|e| (e.key, e.stats)).collect(),
        })
    }
}

impl MetricsReport {
    /// The sub-report containing only cells of one approach.
    pub fn filter_approach(&self, approach: Approach) -> MetricsReport {
        MetricsReport {
            cells: self
                .cells
                .iter()
                .filter(|(k, _)| k.approach == approach)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn total_usage(&self) -> UsageTotals {
        let mut usage = UsageTotals::default();
        for stats in self.cells.values() {
            usage.merge(&stats.usage);
        }
        usage
    }

    pub fn total_unparseable(&self) -> u64 {
        self.cells.values().map(|s| s.counts.unparseable).sum()
    }
}

/// Mean relative increase of one metric over shared cells, as a percentage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricImprovement {
    pub mean_pct: Option<f64>,
    pub cells_used: usize,
    /// Cells skipped because the metric was undefined on either side.
    pub cells_skipped: usize,
}

/// Per-metric mean relative increases of multi-role over single-role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSummary {
    pub precision: MetricImprovement,
    pub recall: MetricImprovement,
    pub f1: MetricImprovement,
}

/// For each metric, the mean over all shared (group, category, prompt_style)
/// cells of (multi - single)/single, in percent. Cells where either side is
/// undefined are skipped and counted.
pub fn improvement_summary(
    report_multi: &MetricsReport,
    report_single: &MetricsReport,
) -> Result<ImprovementSummary, EvalError> {
    let strip = |report: &MetricsReport| -> BTreeMap<(String, VulnCategory, PromptStyle), PrfMetrics> {
        report
            .cells
            .iter()
            .map(|(k, v)| ((k.group.clone(), k.category, k.prompt_style), v.metrics()))
            .collect()
    };
    let multi = strip(report_multi);
    let single = strip(report_single);
    if multi.keys().ne(single.keys()) {
        let only_multi = multi
            .keys()
            .filter(|k| !single.contains_key(*k))
            .map(|k| format!("{}/{}/{}", k.0, k.1, k.2))
            .collect();
        let only_single = single
            .keys()
            .filter(|k| !multi.contains_key(*k))
            .map(|k| format!("{}/{}/{}", k.0, k.1, k.2))
            .collect();
        return Err(EvalError::MismatchedCells {
            only_multi,
            only_single,
        });
    }

    let mut summary = ImprovementSummary::default();
    for (selector, slot) in [
        (
            (|m: &PrfMetrics| m.precision) as fn(&PrfMetrics) -> Option<f64>,
            0usize,
        ),
        (|m: &PrfMetrics| m.recall, 1),
        (|m: &PrfMetrics| m.f1, 2),
    ] {
        let mut increases = Vec::new();
        let mut skipped = 0usize;
        for (key, m) in &multi {
            let s = &single[key];
            match (selector(m), selector(s)) {
                (Some(mv), Some(sv)) if sv != 0.0 => increases.push((mv - sv) / sv),
                _ => skipped += 1,
            }
        }
        let improvement = MetricImprovement {
            mean_pct: if increases.is_empty() {
                None
            } else {
                Some(100.0 * increases.iter().sum::<f64>() / increases.len() as f64)
            },
            cells_used: increases.len(),
            cells_skipped: skipped,
        };
        match slot {
            0 => summary.precision = improvement,
            1 => summary.recall = improvement,
            _ => summary.f1 = improvement,
        }
    }
    Ok(summary)
}

/// One (P, R, F1) triple of the published results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTriple {
    pub group: String,
    pub category: VulnCategory,
    pub approach: Approach,
    pub prompt_style: PromptStyle,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// An F1 that is not the harmonic mean of its row's P and R within
/// [`TABLE_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyViolation {
    pub group: String,
    pub category: VulnCategory,
    pub approach: Approach,
    pub prompt_style: PromptStyle,
    pub expected_f1: f64,
    pub actual_f1: f64,
    pub deviation: f64,
}

/// The bundled transcription of the published results table: 3 groups x
/// 4 categories x 2 approaches x 2 prompt styles = 48 triples.
pub fn reference_results() -> Vec<ReferenceTriple> {
    serde_json::from_str(include_str!("../data/reference_results.json"))
        .expect("bundled reference results parse")
}

/// Checks |f1 - 2PR/(P+R)| <= [`TABLE_TOLERANCE`] for every triple of a
/// complete fixture and returns the violators.
pub fn table1_consistency(
    fixture: &[ReferenceTriple],
) -> Result<Vec<ConsistencyViolation>, EvalError> {
    let expected_len = 3 * VulnCategory::ALL.len() * 2 * 2;
    let mut keys: Vec<_> = fixture
        .iter()
        .map(|t| (t.group.clone(), t.category, t.approach, t.prompt_style))
        .collect();
    keys.sort();
    keys.dedup();
    if fixture.len() != expected_len || keys.len() != expected_len {
        return Err(EvalError::IncompleteFixture {
            expected: expected_len,
            distinct: keys.len(),
            total: fixture.len(),
        });
    }
    let mut violations = Vec::new();
    for t in fixture {
        let harmonic = 2.0 * t.precision * t.recall / (t.precision + t.recall);
        let deviation = (t.f1 - harmonic).abs();
        if deviation > TABLE_TOLERANCE {
            violations.push(ConsistencyViolation {
                group: t.group.clone(),
                category: t.category,
                approach: t.approach,
                prompt_style: t.prompt_style,
                expected_f1: harmonic,
                actual_f1: t.f1,
                deviation,
            });
        }
    }
    Ok(violations)
}

/// Builds a [`MetricsReport`] per approach directly from reference triples
/// (counts and usage zeroed), for improvement computations over the fixture.
pub fn report_from_reference(fixture: &[ReferenceTriple], approach: Approach) -> MetricsReport {
    let cells = fixture
        .iter()
        .filter(|t| t.approach == approach)
        .map(|t| {
            (
                CellKey {
                    group: t.group.clone(),
                    category: t.category,
                    approach: t.approach,
                    prompt_style: t.prompt_style,
                },
                CellStats {
                    precision: Some(t.precision),
                    recall: Some(t.recall),
                    f1: Some(t.f1),
                    counts: ConfusionCounts::default(),
                    usage: UsageTotals::default(),
                },
            )
        })
        .collect();
    MetricsReport { cells }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("reports do not share cell keys (only in multi: {only_multi:?}; only in single: {only_single:?})")]
    MismatchedCells {
        only_multi: Vec<String>,
        only_single: Vec<String>,
    },
    #[error("incomplete fixture: expected {expected} triples, got {total} ({distinct} distinct keys)")]
    IncompleteFixture {
        expected: usize,
        distinct: usize,
        total: usize,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let counts = confusion([
            (true, Some(Verdict::Vulnerable)),
            (false, Some(Verdict::NonVulnerable)),
        ]);
        assert_eq!(counts.true_positive, 1);
        assert_eq!(counts.true_negative, 1);
        assert_eq!(counts.false_positive, 0);
        assert_eq!(counts.false_negative, 0);
        assert_eq!(counts.total(), 2);
    }

    #[test]
    fn inverted_predictions() {
        let counts = confusion([
            (true, Some(Verdict::NonVulnerable)),
            (false, Some(Verdict::Vulnerable)),
        ]);
        assert_eq!(counts.false_negative, 1);
        assert_eq!(counts.false_positive, 1);
    }

    #[test]
    fn unparseable_is_tallied_separately() {
        let mut outcomes = vec![
            (true, Some(Verdict::Vulnerable)),
            (true, Some(Verdict::Vulnerable)),
            (true, Some(Verdict::NonVulnerable)),
            (false, Some(Verdict::NonVulnerable)),
            (false, Some(Verdict::Vulnerable)),
            (true, None),
        ];
        outcomes.extend([
            (false, Some(Verdict::NonVulnerable)),
            (false, Some(Verdict::NonVulnerable)),
            (true, Some(Verdict::Vulnerable)),
            (false, Some(Verdict::Vulnerable)),
        ]);
        let counts = confusion(outcomes);
        assert_eq!(counts.total(), 10);
        assert_eq!(counts.unparseable, 1);
        assert_eq!(
            counts.true_positive
                + counts.false_positive
                + counts.true_negative
                + counts.false_negative,
            9
        );
    }

    #[test]
    fn prf_hand_arithmetic() {
        let counts = ConfusionCounts {
            true_positive: 3,
            false_positive: 1,
            false_negative: 2,
            ..Default::default()
        };
        let m = prf(&counts);
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.recall, Some(0.6));
        let f1 = m.f1.unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12, "f1 = {f1}");
    }

    #[test]
    fn zero_denominators_are_undefined_not_zero() {
        let counts = ConfusionCounts {
            true_negative: 5,
            ..Default::default()
        };
        let m = prf(&counts);
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(m.f1, None);
    }

    #[test]
    fn prf_is_scale_consistent() {
        let counts = ConfusionCounts {
            true_positive: 6,
            false_positive: 2,
            true_negative: 8,
            false_negative: 4,
            unparseable: 0,
        };
        let scaled = ConfusionCounts {
            true_positive: 18,
            false_positive: 6,
            true_negative: 24,
            false_negative: 12,
            unparseable: 0,
        };
        let a = prf(&counts);
        let b = prf(&scaled);
        assert!((a.precision.unwrap() - b.precision.unwrap()).abs() < 1e-12);
        assert!((a.recall.unwrap() - b.recall.unwrap()).abs() < 1e-12);
        assert!((a.f1.unwrap() - b.f1.unwrap()).abs() < 1e-12);
    }

    fn uniform_report(approach: Approach, p: f64, r: f64) -> MetricsReport {
        let mut cells = BTreeMap::new();
        for category in VulnCategory::ALL {
            cells.insert(
                CellKey {
                    group: "G".into(),
                    category,
                    approach,
                    prompt_style: PromptStyle::Basic,
                },
                CellStats {
                    precision: Some(p),
                    recall: Some(r),
                    f1: Some(2.0 * p * r / (p + r)),
                    counts: ConfusionCounts::default(),
                    usage: UsageTotals::default(),
                },
            );
        }
        MetricsReport { cells }
    }

    #[test]
    fn identical_reports_improve_by_zero() {
        let single = uniform_report(Approach::SingleRole, 0.5, 0.5);
        let multi = uniform_report(Approach::MultiRole, 0.5, 0.5);
        let s = improvement_summary(&multi, &single).unwrap();
        assert_eq!(s.precision.mean_pct, Some(0.0));
        assert_eq!(s.recall.mean_pct, Some(0.0));
        assert_eq!(s.f1.mean_pct, Some(0.0));
        // Swapping arguments still yields zero.
        let swapped = improvement_summary(&single, &multi).unwrap();
        assert_eq!(swapped.precision.mean_pct, Some(0.0));
    }

    #[test]
    fn uniform_ratio_improvement() {
        let single = uniform_report(Approach::SingleRole, 0.5, 0.5);
        let multi = uniform_report(Approach::MultiRole, 0.6, 0.5);
        let s = improvement_summary(&multi, &single).unwrap();
        let p = s.precision.mean_pct.unwrap();
        assert!((p - 20.0).abs() < 1e-9, "precision improvement {p}");
        assert_eq!(s.precision.cells_used, 4);
        assert_eq!(s.precision.cells_skipped, 0);
    }

    #[test]
    fn mismatched_cell_keys_is_an_error() {
        let single = uniform_report(Approach::SingleRole, 0.5, 0.5);
        let mut multi = uniform_report(Approach::MultiRole, 0.5, 0.5);
        let extra = CellKey {
            group: "H".into(),
            category: VulnCategory::FC,
            approach: Approach::MultiRole,
            prompt_style: PromptStyle::ChainOfThought,
        };
        multi.cells.insert(extra, CellStats::default());
        assert!(matches!(
            improvement_summary(&multi, &single),
            Err(EvalError::MismatchedCells { .. })
        ));
    }

    #[test]
    fn undefined_cells_are_skipped_with_count() {
        let single = uniform_report(Approach::SingleRole, 0.5, 0.5);
        let mut multi = uniform_report(Approach::MultiRole, 0.6, 0.6);
        if let Some(stats) = multi.cells.values_mut().next() {
            stats.precision = None;
        }
        let s = improvement_summary(&multi, &single).unwrap();
        assert_eq!(s.precision.cells_used, 3);
        assert_eq!(s.precision.cells_skipped, 1);
        assert_eq!(s.recall.cells_used, 4);
    }

    #[test]
    fn bundled_reference_is_complete_and_consistent() {
        let fixture = reference_results();
        assert_eq!(fixture.len(), 48);
        let violations = table1_consistency(&fixture).unwrap();
        assert!(violations.is_empty(), "violations: {violations:?}");
    }

    #[test]
    fn spot_anchor_rows() {
        let fixture = reference_results();
        let find = |group: &str, cat: VulnCategory, approach: Approach, style: PromptStyle| {
            fixture
                .iter()
                .find(|t| {
                    t.group == group
                        && t.category == cat
                        && t.approach == approach
                        && t.prompt_style == style
                })
                .unwrap()
        };
        let g1 = find("Group1", VulnCategory::FC, Approach::SingleRole, PromptStyle::Basic);
        assert_eq!((g1.precision, g1.recall, g1.f1), (0.735, 0.610, 0.667));
        let g2 = find("Group2", VulnCategory::AU, Approach::MultiRole, PromptStyle::ChainOfThought);
        assert_eq!((g2.precision, g2.recall, g2.f1), (0.639, 0.778, 0.702));
        let hm = 2.0 * g2.precision * g2.recall / (g2.precision + g2.recall);
        assert!((hm - g2.f1).abs() <= TABLE_TOLERANCE);
        let g3 = find("Group3", VulnCategory::PU, Approach::MultiRole, PromptStyle::ChainOfThought);
        assert_eq!((g3.precision, g3.recall, g3.f1), (0.237, 0.790, 0.364));
        let hm = 2.0 * g3.precision * g3.recall / (g3.precision + g3.recall);
        assert!((hm - g3.f1).abs() <= TABLE_TOLERANCE);
    }

    #[test]
    fn corrupted_triple_is_reported() {
        let mut fixture = reference_results();
        fixture[0].f1 = 0.9;
        let violations = table1_consistency(&fixture).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].actual_f1, 0.9);
    }

    #[test]
    fn incomplete_fixture_is_an_error() {
        let mut fixture = reference_results();
        fixture.pop();
        assert!(matches!(
            table1_consistency(&fixture),
            Err(EvalError::IncompleteFixture { expected: 48, .. })
        ));
        // Right length but a duplicated key is also incomplete.
        let mut fixture = reference_results();
        let dup = fixture[0].clone();
        fixture[1] = dup;
        assert!(matches!(
            table1_consistency(&fixture),
            Err(EvalError::IncompleteFixture { .. })
        ));
    }

    #[test]
    fn metrics_report_serde_round_trip() {
        let report = uniform_report(Approach::MultiRole, 0.6, 0.7);
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
