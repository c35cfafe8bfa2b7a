//! Property tests for the spec-level invariants: serde round-trips, purity of
//! parsing and rendering, sampling determinism and composition, usage-total
//! commutativity, and metric agreement with a brute-force recount oracle.

use proptest::prelude::*;

use consilium::backend::{usage_total, ChatResponse, UsageTotals};
use consilium::corpus::{load_corpus_reader, sample_group, GroupSpec};
use consilium::evalkit::{confusion, prf, ConfusionCounts};
use consilium::model::{
    DiscussionTranscript, Judgment, Role, RunConfig, Stage, Turn, Verdict, VulnCategory,
};
use consilium::parser::parse_judgment;

use std::io::{BufReader, Cursor};

fn arb_verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![Just(Verdict::NonVulnerable), Just(Verdict::Vulnerable)]
}

fn arb_judgment() -> impl Strategy<Value = Judgment> {
    (arb_verdict(), ".{0,40}").prop_map(|(v, r)| Judgment::new(v, r))
}

fn arb_turn(index: usize) -> impl Strategy<Value = Turn> {
    (
        prop_oneof![Just(Role::Tester), Just(Role::Developer)],
        prop_oneof![Just(Stage::Initialization), Just(Stage::Discussion)],
        ".{0,80}",
        proptest::option::of(arb_judgment()),
        0u64..200,
        0u64..120,
        any::<bool>(),
    )
        .prop_map(move |(role, stage, raw, judgment, pt, ct, est)| Turn {
            index,
            role,
            stage,
            raw_text: raw,
            judgment,
            prompt_tokens: pt,
            completion_tokens: ct,
            usage_estimated: est,
        })
}

fn arb_transcript() -> impl Strategy<Value = DiscussionTranscript> {
    (1usize..8, "[a-z0-9-]{1,12}", arb_judgment(), 1u32..6, any::<bool>()).prop_flat_map(
        |(n, segment_id, final_judgment, rounds_used, consensus)| {
            let turns: Vec<_> = (0..n).map(arb_turn).collect();
            (Just(segment_id), turns, Just(final_judgment), Just(rounds_used), Just(consensus))
                .prop_map(|(segment_id, turns, final_judgment, rounds_used, consensus)| {
                    DiscussionTranscript {
                        segment_id,
                        turns,
                        rounds_used,
                        consensus_reached: consensus,
                        final_judgment,
                    }
                })
        },
    )
}

proptest! {
    /// Serializing then deserializing any transcript yields an equal value.
    #[test]
    fn transcript_round_trips_through_json(transcript in arb_transcript()) {
        let json = serde_json::to_string(&transcript).unwrap();
        let back: DiscussionTranscript = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, transcript);
    }

    /// Config serde keeps defaults and values.
    #[test]
    fn config_round_trips(depth in 1u32..10, tokens in 1u32..500, retries in 0u32..5) {
        let config = RunConfig {
            max_depth: depth,
            max_response_tokens: tokens,
            parse_retries: retries,
            ..RunConfig::default()
        };
        let json = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, config);
    }

    /// parse_judgment never panics and is deterministic.
    #[test]
    fn parsing_is_total_and_pure(text in ".{0,300}") {
        let a = parse_judgment(&text);
        let b = parse_judgment(&text);
        prop_assert_eq!(a, b);
    }

    /// Any text whose first non-blank line is exactly "VERDICT: 0" or
    /// "VERDICT: 1" parses via the strict header regardless of the remainder.
    #[test]
    fn strict_header_always_wins(bit in 0u8..2, lead in "[ \t\n]{0,6}", rest in ".{0,200}") {
        let text = format!("{lead}VERDICT: {bit}\n{rest}");
        let outcome = parse_judgment(&text);
        prop_assert_eq!(outcome.rule_used, consilium::ParseRule::StrictHeader);
        prop_assert_eq!(outcome.judgment.unwrap().verdict.as_bit(), bit);
    }

    /// usage_total is order-independent (commutative monoid over responses).
    #[test]
    fn usage_total_is_permutation_invariant(pairs in proptest::collection::vec((0u64..10_000, 0u64..10_000), 0..12), seed in any::<u64>()) {
        let responses: Vec<ChatResponse> = pairs
            .iter()
            .map(|&(p, c)| ChatResponse {
                text: String::new(),
                prompt_tokens: p,
                completion_tokens: c,
                usage_estimated: false,
            })
            .collect();
        let forward = usage_total(&responses);
        let mut shuffled = responses.clone();
        // Deterministic in-test shuffle.
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            shuffled.swap(i, j);
        }
        let backward = usage_total(&shuffled);
        prop_assert_eq!(forward, backward);
        let expected: u64 = pairs.iter().map(|&(p, c)| p + c).sum();
        prop_assert_eq!(forward.total_tokens, expected);
        prop_assert_eq!(forward, UsageTotals::new(forward.prompt_tokens, forward.completion_tokens));
    }

    /// confusion + prf agree with an independent brute-force recount.
    #[test]
    fn confusion_matches_brute_force_oracle(outcomes in proptest::collection::vec((any::<bool>(), proptest::option::of(arb_verdict())), 0..60)) {
        let counts = confusion(outcomes.clone());
        let oracle = brute_force_counts(&outcomes);
        prop_assert_eq!(counts, oracle);
        let metrics = prf(&counts);
        let (op, or, of1) = brute_force_prf(&outcomes);
        prop_assert_eq!(metrics.precision, op);
        prop_assert_eq!(metrics.recall, or);
        prop_assert_eq!(metrics.f1, of1);
        prop_assert_eq!(counts.total() as usize, outcomes.len());
    }

    /// Group sampling is deterministic and exactly matches the requested mix.
    #[test]
    fn sampling_is_deterministic_and_exact(
        vuln in 0usize..15,
        clean in 0usize..15,
        seed in any::<u64>(),
    ) {
        let mut lines = String::new();
        for i in 0..20 {
            lines.push_str(&format!(
                "{{\"id\": \"v{i}\", \"code\": \"a{i}\", \"label\": 1, \"category\": \"AE\"}}\n"
            ));
            lines.push_str(&format!(
                "{{\"id\": \"n{i}\", \"code\": \"b{i}\", \"label\": 0, \"category\": \"AE\"}}\n"
            ));
        }
        let corpus = load_corpus_reader(BufReader::new(Cursor::new(lines))).unwrap();
        let spec = GroupSpec {
            name: "g".into(),
            vulnerable_count: vuln,
            non_vulnerable_count: clean,
            category: VulnCategory::AE,
            seed,
        };
        let a = sample_group(&corpus, &spec).unwrap();
        let b = sample_group(&corpus, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), vuln + clean);
        prop_assert_eq!(a.iter().filter(|s| s.label).count(), vuln);
        let mut ids: Vec<_> = a.iter().map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), vuln + clean);
    }
}

/// Independent recount: a naive if/else chain, no shared code with evalkit.
fn brute_force_counts(outcomes: &[(bool, Option<Verdict>)]) -> ConfusionCounts {
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fn_ = 0;
    let mut un = 0;
    for (truth, pred) in outcomes {
        if pred.is_none() {
            un += 1;
        } else if *truth && pred.unwrap() == Verdict::Vulnerable {
            tp += 1;
        } else if !*truth && pred.unwrap() == Verdict::Vulnerable {
            fp += 1;
        } else if !*truth && pred.unwrap() == Verdict::NonVulnerable {
            tn += 1;
        } else {
            fn_ += 1;
        }
    }
    ConfusionCounts {
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fn_,
        unparseable: un,
    }
}

fn brute_force_prf(
    outcomes: &[(bool, Option<Verdict>)],
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let c = brute_force_counts(outcomes);
    let (tp, fp, fn_) = (
        c.true_positive as f64,
        c.false_positive as f64,
        c.false_negative as f64,
    );
    let p = if tp + fp > 0.0 { Some(tp / (tp + fp)) } else { None };
    let r = if tp + fn_ > 0.0 { Some(tp / (tp + fn_)) } else { None };
    let f1 = match (p, r) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    (p, r, f1)
}
