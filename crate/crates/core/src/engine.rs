//! The protocol state machine: runs the single-role baseline or the
//! three-stage multi-role discussion (initialization, discussion, conclusion)
//! to a final judgment.
//!
//! A round is one tester turn followed by one developer turn; the
//! initialization exchange counts as round 1. Consensus — equal latest
//! verdicts — is checked after each developer turn, and the loop ends on
//! consensus or when the round reaches `max_depth`. The conclusion rule is
//! always the tester's latest judgment.
//!
//! Each role keeps its own isolated message history for the whole discussion;
//! the only cross-role traffic is the relayed judgment+reasoning embedded in
//! the prompts. One run is strictly sequential; runs over different segments
//! may execute concurrently, sharing only the backend.

use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::model::{
    validate_config, Approach, CodeSegment, ConfigError, DiscussionTranscript, Judgment, Role,
    RunConfig, Stage, Turn,
};
use crate::parser::parse_judgment;
use crate::prompting::{format_reminder, PromptError, RenderedPrompt, TemplateSet};

/// Mutable state of one discussion as turns arrive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscussionState {
    pub stage: Stage,
    /// Completed tester+developer rounds.
    pub round: u32,
    pub tester_last: Option<Judgment>,
    pub developer_last: Option<Judgment>,
    pub history: Vec<Turn>,
    pub consensus: bool,
    max_depth: u32,
}

impl DiscussionState {
    pub fn new(max_depth: u32) -> Self {
        Self {
            stage: Stage::Initialization,
            round: 0,
            tester_last: None,
            developer_last: None,
            history: Vec::new(),
            consensus: false,
            max_depth,
        }
    }

    /// Applies one turn. Turns without a judgment are recorded but never
    /// update a verdict or complete a round (they are parse-retry attempts).
    /// A developer turn carrying a judgment completes a round, after which
    /// consensus and depth are checked, in that order.
    pub fn step(mut self, turn: Turn) -> Result<Self, EngineError> {
        if self.stage == Stage::Conclusion {
            return Err(EngineError::StepAfterConclusion);
        }
        if turn.index != self.history.len() {
            return Err(EngineError::TurnIndexMismatch {
                got: turn.index,
                expected: self.history.len(),
            });
        }
        let role = turn.role;
        let judgment = turn.judgment.clone();
        self.history.push(turn);
        let Some(judgment) = judgment else {
            return Ok(self);
        };
        match role {
            Role::Tester => self.tester_last = Some(judgment),
            Role::Developer => {
                self.developer_last = Some(judgment);
                self.round += 1;
                let agreed = matches!(
                    (&self.tester_last, &self.developer_last),
                    (Some(t), Some(d)) if t.verdict == d.verdict
                );
                if agreed {
                    self.stage = Stage::Conclusion;
                    self.consensus = true;
                } else if self.round >= self.max_depth {
                    self.stage = Stage::Conclusion;
                } else {
                    self.stage = Stage::Discussion;
                }
            }
        }
        Ok(self)
    }

    /// Rounds the run occupied: completed rounds, plus the one in progress
    /// when the run was cut short.
    fn rounds_used(&self) -> u32 {
        if self.stage == Stage::Conclusion {
            self.round.max(1)
        } else {
            self.round + 1
        }
    }
}

/// Replays persisted turns through [`DiscussionState::step`] and returns the
/// reproduced (consensus flag, final verdict). Used to check transcript
/// self-consistency.
pub fn replay(turns: &[Turn], max_depth: u32) -> Result<(bool, Option<Judgment>), EngineError> {
    let mut state = DiscussionState::new(max_depth);
    for turn in turns {
        state = state.step(turn.clone())?;
    }
    Ok((state.consensus, state.tester_last))
}

/// Runs discussions with a fixed template set. `Engine::default()` uses the
/// built-in templates.
#[derive(Debug, Clone, Default)]
pub struct Engine {
    templates: TemplateSet,
}

impl Engine {
    pub fn new(templates: TemplateSet) -> Self {
        Self { templates }
    }

    /// Dispatches on `config.approach`.
    pub fn run(
        &self,
        segment: &CodeSegment,
        config: &RunConfig,
        backend: &dyn ChatBackend,
    ) -> Result<DiscussionTranscript, EngineError> {
        match config.approach {
            Approach::SingleRole => self.run_single_role(segment, config, backend),
            Approach::MultiRole => self.run_multi_role(segment, config, backend),
        }
    }

    /// Single-role baseline: one tester query (plus parse retries), no
    /// discussion. Consensus is true by convention and rounds_used is 1.
    pub fn run_single_role(
        &self,
        segment: &CodeSegment,
        config: &RunConfig,
        backend: &dyn ChatBackend,
    ) -> Result<DiscussionTranscript, EngineError> {
        let config = validate_config(config.clone())?;
        if config.approach != Approach::SingleRole {
            return Err(EngineError::ApproachMismatch {
                expected: Approach::SingleRole,
            });
        }
        let mut session = RoleSession::new(Role::Tester, &config);
        let prompt = self
            .templates
            .render_initial(Role::Tester, segment, config.prompt_style)?;
        let state = session.run_slot(
            prompt,
            Stage::Initialization,
            backend,
            &config,
            DiscussionState::new(config.max_depth),
        )?;
        let Some(judgment) = state.tester_last.clone() else {
            return Err(EngineError::Unparseable {
                segment_id: segment.id.clone(),
                turns: state.history,
            });
        };
        Ok(DiscussionTranscript {
            segment_id: segment.id.clone(),
            turns: state.history,
            rounds_used: 1,
            consensus_reached: true,
            final_judgment: judgment,
        })
    }

    /// The three-stage multi-role discussion.
    ///
    /// Initialization: the tester judges first and its judgment+reasoning is
    /// forwarded to the developer. Discussion: alternating tester/developer
    /// rounds, each role seeing the peer's latest judgment+reasoning, until
    /// consensus or depth exhaustion. Conclusion: the tester's latest
    /// judgment is the final judgment.
    pub fn run_multi_role(
        &self,
        segment: &CodeSegment,
        config: &RunConfig,
        backend: &dyn ChatBackend,
    ) -> Result<DiscussionTranscript, EngineError> {
        let config = validate_config(config.clone())?;
        if config.approach != Approach::MultiRole {
            return Err(EngineError::ApproachMismatch {
                expected: Approach::MultiRole,
            });
        }
        let mut tester = RoleSession::new(Role::Tester, &config);
        let mut developer = RoleSession::new(Role::Developer, &config);
        let mut state = DiscussionState::new(config.max_depth);

        // Initialization: tester first.
        let prompt = self
            .templates
            .render_initial(Role::Tester, segment, config.prompt_style)?;
        state = tester.run_slot(prompt, Stage::Initialization, backend, &config, state)?;
        if state.tester_last.is_none() {
            // No judgment ever: the segment is unparseable for this run.
            return Err(EngineError::Unparseable {
                segment_id: segment.id.clone(),
                turns: state.history,
            });
        }

        // Initialization: the tester's judgment is forwarded to the developer.
        let peer = state.tester_last.clone().expect("tester judged");
        let prompt = self
            .templates
            .render_discussion(Role::Developer, segment, &peer, None)?;
        state = developer.run_slot(prompt, Stage::Initialization, backend, &config, state)?;
        if state.developer_last.is_none() {
            // Developer never parseable: conclude on the tester's judgment.
            return Ok(conclude_early(segment, state));
        }

        // Discussion rounds until consensus or depth exhaustion.
        while state.stage == Stage::Discussion {
            let peer = state.developer_last.clone().expect("developer judged");
            let own = state.tester_last.clone();
            let prompt =
                self.templates
                    .render_discussion(Role::Tester, segment, &peer, own.as_ref())?;
            state = tester.run_slot(prompt, Stage::Discussion, backend, &config, state)?;
            // A tester slot that stays unparseable carries its previous
            // judgment forward; the round continues either way.

            let peer = state.tester_last.clone().expect("tester judgment carried");
            let own = state.developer_last.clone();
            let prompt =
                self.templates
                    .render_discussion(Role::Developer, segment, &peer, own.as_ref())?;
            let before = state.history.len();
            state = developer.run_slot(prompt, Stage::Discussion, backend, &config, state)?;
            let resolved = state.history[before..]
                .iter()
                .any(|t| t.judgment.is_some());
            if !resolved {
                return Ok(conclude_early(segment, state));
            }
        }

        let final_judgment = state.tester_last.clone().expect("tester judged");
        let rounds_used = state.rounds_used();
        Ok(DiscussionTranscript {
            segment_id: segment.id.clone(),
            turns: state.history,
            rounds_used,
            consensus_reached: state.consensus,
            final_judgment,
        })
    }
}

/// Concludes a run whose developer went unparseable after retries: no
/// consensus, the tester's latest judgment stands.
fn conclude_early(segment: &CodeSegment, state: DiscussionState) -> DiscussionTranscript {
    let final_judgment = state
        .tester_last
        .clone()
        .expect("tester judged before developer slots run");
    let rounds_used = state.rounds_used();
    DiscussionTranscript {
        segment_id: segment.id.clone(),
        turns: state.history,
        rounds_used,
        consensus_reached: false,
        final_judgment,
    }
}

/// One role's isolated conversation: its system text plus alternating
/// prompt/reply messages. Nothing is shared with the peer role.
struct RoleSession {
    role: Role,
    model_name: String,
    max_tokens: u32,
    temperature: f64,
    system_text: String,
    messages: Vec<ChatMessage>,
}

impl RoleSession {
    fn new(role: Role, config: &RunConfig) -> Self {
        Self {
            role,
            model_name: config.model_name.clone(),
            max_tokens: config.max_response_tokens,
            temperature: config.temperature,
            system_text: String::new(),
            messages: Vec::new(),
        }
    }

    fn request(&self) -> ChatRequest {
        ChatRequest {
            model_name: self.model_name.clone(),
            system_text: self.system_text.clone(),
            user_messages: self.messages.clone(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        }
    }

    /// One slot: ask, parse, and retry with a format reminder up to
    /// `parse_retries` times. Every attempt is recorded as a turn and stepped
    /// into the state as it happens; the slot resolves on the first
    /// parseable reply, or leaves the role's previous judgment standing.
    fn run_slot(
        &mut self,
        prompt: RenderedPrompt,
        stage: Stage,
        backend: &dyn ChatBackend,
        config: &RunConfig,
        mut state: DiscussionState,
    ) -> Result<DiscussionState, EngineError> {
        self.system_text = prompt.system_text;
        self.messages.push(ChatMessage::user(prompt.user_text));
        for attempt in 0..=config.parse_retries {
            let response = backend.complete(&self.request())?;
            self.messages.push(ChatMessage::assistant(&response.text));
            let outcome = parse_judgment(&response.text);
            let resolved = outcome.judgment.is_some();
            let turn = Turn {
                index: state.history.len(),
                role: self.role,
                stage,
                raw_text: response.text,
                judgment: outcome.judgment,
                prompt_tokens: response.prompt_tokens,
                completion_tokens: response.completion_tokens,
                usage_estimated: response.usage_estimated,
            };
            state = state.step(turn)?;
            if resolved {
                return Ok(state);
            }
            if attempt < config.parse_retries {
                self.messages.push(ChatMessage::user(format_reminder()));
            }
        }
        Ok(state)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("segment '{segment_id}' produced no parseable judgment after retries")]
    Unparseable { segment_id: String, turns: Vec<Turn> },
    #[error("step called after the conclusion stage")]
    StepAfterConclusion,
    #[error("turn index {got} does not match history length {expected}")]
    TurnIndexMismatch { got: usize, expected: usize },
    #[error("config approach does not match the operation (expected {expected})")]
    ApproachMismatch { expected: Approach },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::model::{Verdict, VulnCategory};

    fn segment() -> CodeSegment {
        CodeSegment::new("seg-1", "memcpy(dst, src, len);", true, VulnCategory::FC).unwrap()
    }

    fn multi_config() -> RunConfig {
        RunConfig::new(Approach::MultiRole, crate::model::PromptStyle::Basic)
    }

    fn role_backend(tester: &[&str], developer: &[&str]) -> ScriptedBackend {
        ScriptedBackend::empty()
            .rule("software tester", tester)
            .rule("developer who wrote", developer)
    }

    fn turn(index: usize, role: Role, verdict: Option<Verdict>) -> Turn {
        Turn {
            index,
            role,
            stage: Stage::Discussion,
            raw_text: String::new(),
            judgment: verdict.map(|v| Judgment::new(v, "")),
            prompt_tokens: 0,
            completion_tokens: 0,
            usage_estimated: true,
        }
    }

    #[test]
    fn single_role_single_exchange() {
        let backend = role_backend(&["VERDICT: 1\nbuffer overflow"], &[]);
        let engine = Engine::default();
        let config = RunConfig::new(Approach::SingleRole, crate::model::PromptStyle::Basic);
        let t = engine.run_single_role(&segment(), &config, &backend).unwrap();
        assert_eq!(t.turns.len(), 1);
        assert_eq!(t.rounds_used, 1);
        assert!(t.consensus_reached);
        assert_eq!(t.final_judgment.verdict, Verdict::Vulnerable);
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn single_role_retry_trace() {
        // Two garbage replies then a valid one, parse_retries = 2:
        // three turns recorded, final verdict 0.
        let backend = role_backend(&["gibberish", "more gibberish", "VERDICT: 0\nfine"], &[]);
        let engine = Engine::default();
        let config = RunConfig::new(Approach::SingleRole, crate::model::PromptStyle::Basic);
        let t = engine.run_single_role(&segment(), &config, &backend).unwrap();
        assert_eq!(t.turns.len(), 3);
        assert!(t.turns[0].judgment.is_none());
        assert!(t.turns[1].judgment.is_none());
        assert_eq!(t.final_judgment.verdict, Verdict::NonVulnerable);
    }

    #[test]
    fn single_role_unparseable_after_retries() {
        let backend = role_backend(&["a", "b", "c"], &[]);
        let engine = Engine::default();
        let config = RunConfig::new(Approach::SingleRole, crate::model::PromptStyle::Basic);
        let err = engine.run_single_role(&segment(), &config, &backend).unwrap_err();
        match err {
            EngineError::Unparseable { segment_id, turns } => {
                assert_eq!(segment_id, "seg-1");
                assert_eq!(turns.len(), 3);
            }
            other => panic!("expected Unparseable, got {other:?}"),
        }
    }

    #[test]
    fn immediate_agreement_ends_after_initialization() {
        let backend = role_backend(&["VERDICT: 1\nbad"], &["VERDICT: 1\nagreed"]);
        let engine = Engine::default();
        let t = engine.run_multi_role(&segment(), &multi_config(), &backend).unwrap();
        assert_eq!(t.rounds_used, 1);
        assert!(t.consensus_reached);
        assert_eq!(t.final_judgment.verdict, Verdict::Vulnerable);
        assert_eq!(t.turns.len(), 2);
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn persistent_disagreement_stops_at_depth() {
        let backend = role_backend(
            &["VERDICT: 1\na"; 5],
            &["VERDICT: 0\nb"; 5],
        );
        let engine = Engine::default();
        let t = engine.run_multi_role(&segment(), &multi_config(), &backend).unwrap();
        assert_eq!(t.rounds_used, 5);
        assert!(!t.consensus_reached);
        assert_eq!(t.final_judgment.verdict, Verdict::Vulnerable);
        assert_eq!(backend.calls(), 10);
    }

    #[test]
    fn tester_flips_after_developer_argument() {
        // The wcsncat shape: tester 1, developer 0, tester revises to 0.
        let backend = role_backend(
            &["VERDICT: 1\nunsanitized concatenation", "VERDICT: 0\nconvinced by the size argument"],
            &["VERDICT: 0\nwcsncat bounds the copy", "VERDICT: 0\nstill safe"],
        );
        let engine = Engine::default();
        let t = engine.run_multi_role(&segment(), &multi_config(), &backend).unwrap();
        assert!(t.consensus_reached);
        assert_eq!(t.rounds_used, 2);
        assert_eq!(t.final_judgment.verdict, Verdict::NonVulnerable);
    }

    #[test]
    fn developer_unparseable_concludes_on_tester_judgment() {
        let backend = role_backend(
            &["VERDICT: 1\nbad"],
            &["???", "???", "???"],
        );
        let engine = Engine::default();
        let t = engine.run_multi_role(&segment(), &multi_config(), &backend).unwrap();
        assert!(!t.consensus_reached);
        assert_eq!(t.final_judgment.verdict, Verdict::Vulnerable);
        assert_eq!(t.rounds_used, 1);
        assert_eq!(t.turns.len(), 4);
    }

    #[test]
    fn tester_unparseable_at_initialization_is_unparseable_run() {
        let backend = role_backend(&["?", "?", "?"], &["VERDICT: 0\nx"]);
        let engine = Engine::default();
        let err = engine.run_multi_role(&segment(), &multi_config(), &backend).unwrap_err();
        assert!(matches!(err, EngineError::Unparseable { .. }));
    }

    #[test]
    fn tester_carry_forward_mid_discussion() {
        // Round 1: t=1, d=0. Round 2: tester garbage (retries exhausted,
        // carries 1 forward), developer says 1 -> consensus on 1.
        let backend = role_backend(
            &["VERDICT: 1\nbad", "?", "?", "?"],
            &["VERDICT: 0\nfine", "VERDICT: 1\nactually bad"],
        );
        let engine = Engine::default();
        let t = engine.run_multi_role(&segment(), &multi_config(), &backend).unwrap();
        assert!(t.consensus_reached);
        assert_eq!(t.rounds_used, 2);
        assert_eq!(t.final_judgment.verdict, Verdict::Vulnerable);
    }

    #[test]
    fn step_rejects_turns_after_conclusion() {
        let state = DiscussionState::new(5);
        let state = state.step(turn(0, Role::Tester, Some(Verdict::Vulnerable))).unwrap();
        let state = state.step(turn(1, Role::Developer, Some(Verdict::Vulnerable))).unwrap();
        assert_eq!(state.stage, Stage::Conclusion);
        let err = state.step(turn(2, Role::Tester, Some(Verdict::Vulnerable))).unwrap_err();
        assert!(matches!(err, EngineError::StepAfterConclusion));
    }

    #[test]
    fn step_transition_table() {
        // All four verdict pairs, below depth and at depth.
        let pairs = [
            (Verdict::Vulnerable, Verdict::Vulnerable, true),
            (Verdict::Vulnerable, Verdict::NonVulnerable, false),
            (Verdict::NonVulnerable, Verdict::Vulnerable, false),
            (Verdict::NonVulnerable, Verdict::NonVulnerable, true),
        ];
        for (t_v, d_v, equal) in pairs {
            // Below depth: agreement concludes, disagreement continues.
            let state = DiscussionState::new(5)
                .step(turn(0, Role::Tester, Some(t_v)))
                .unwrap()
                .step(turn(1, Role::Developer, Some(d_v)))
                .unwrap();
            if equal {
                assert_eq!(state.stage, Stage::Conclusion);
                assert!(state.consensus);
            } else {
                assert_eq!(state.stage, Stage::Discussion);
                assert!(!state.consensus);
                assert_eq!(state.round, 1);
            }
            // At depth: both conclude; only agreement sets consensus.
            let state = DiscussionState::new(1)
                .step(turn(0, Role::Tester, Some(t_v)))
                .unwrap()
                .step(turn(1, Role::Developer, Some(d_v)))
                .unwrap();
            assert_eq!(state.stage, Stage::Conclusion);
            assert_eq!(state.consensus, equal);
        }
    }

    #[test]
    fn step_validates_turn_indices() {
        let state = DiscussionState::new(5);
        let err = state.step(turn(3, Role::Tester, None)).unwrap_err();
        assert!(matches!(err, EngineError::TurnIndexMismatch { got: 3, expected: 0 }));
    }

    #[test]
    fn replay_reproduces_consensus_and_final_verdict() {
        let backend = role_backend(
            &["VERDICT: 1\na", "VERDICT: 0\nb"],
            &["VERDICT: 0\nc", "VERDICT: 0\nd"],
        );
        let engine = Engine::default();
        let config = multi_config();
        let t = engine.run_multi_role(&segment(), &config, &backend).unwrap();
        let (consensus, final_j) = replay(&t.turns, config.max_depth).unwrap();
        assert_eq!(consensus, t.consensus_reached);
        assert_eq!(final_j.unwrap().verdict, t.final_judgment.verdict);
    }

    #[test]
    fn requests_carry_configured_token_cap() {
        // Request max_tokens is checked inside the scripted run via the
        // session builder.
        let config = multi_config();
        let session = RoleSession::new(Role::Tester, &config);
        assert_eq!(session.request().max_tokens, 120);
    }

    #[test]
    fn approach_mismatch_is_rejected() {
        let backend = ScriptedBackend::empty();
        let engine = Engine::default();
        let config = RunConfig::new(Approach::SingleRole, crate::model::PromptStyle::Basic);
        assert!(matches!(
            engine.run_multi_role(&segment(), &config, &backend),
            Err(EngineError::ApproachMismatch { expected: Approach::MultiRole })
        ));
    }
}
