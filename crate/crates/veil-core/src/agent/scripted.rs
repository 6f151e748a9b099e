//! Deterministic scripted agents used as protocol oracles.
//!
//! A scripted backend is a pure function of (profile, task kind, observable
//! state): identical inputs produce byte-identical raw responses, which makes
//! full group runs reproducible from the seed alone.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::domain::{Principle, PrincipleKind};

use super::backend::{Backend, BackendError, BackendRequest, Feedback};
use super::{HistoryEntry, Stage};

/// How a scripted agent answers the confirmation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmStyle {
    /// Confirm whatever the revealed unanimous vote is.
    Always,
    /// Confirm only when the revealed kind matches the agent's own vote.
    #[default]
    OwnKindOnly,
    /// Refuse every confirmation (used to exercise stage-2 failure).
    Never,
}

/// Behavioral core of a scripted agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum ScriptedPolicy {
    /// Always advocates, chooses, and votes its fixed principle.
    Stubborn { principle: Principle },
    /// Votes the modal principle advocated in the observed history; falls
    /// back to its initial preference when no statements were heard.
    Conformist {
        initial: Principle,
        #[serde(default = "default_floor")]
        floor: f64,
        #[serde(default = "default_range")]
        range: f64,
    },
}

fn default_floor() -> f64 {
    10_000.0
}

fn default_range() -> f64 {
    20_000.0
}

/// A full scripted profile: policy plus vote-initiation and confirmation
/// behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedProfile {
    #[serde(flatten)]
    pub policy: ScriptedPolicy,
    /// The agent reports readiness from this round on (1 = always ready).
    #[serde(default = "default_ready_round")]
    pub ready_after_round: u32,
    #[serde(default)]
    pub confirm: ConfirmStyle,
}

fn default_ready_round() -> u32 {
    1
}

impl ScriptedProfile {
    pub fn stubborn(principle: Principle) -> ScriptedProfile {
        ScriptedProfile {
            policy: ScriptedPolicy::Stubborn { principle },
            ready_after_round: 1,
            confirm: ConfirmStyle::OwnKindOnly,
        }
    }

    pub fn conformist(initial: Principle) -> ScriptedProfile {
        ScriptedProfile {
            policy: ScriptedPolicy::Conformist {
                initial,
                floor: default_floor(),
                range: default_range(),
            },
            ready_after_round: 1,
            confirm: ConfirmStyle::Always,
        }
    }

    pub fn ready_after(mut self, round: u32) -> ScriptedProfile {
        self.ready_after_round = round;
        self
    }
}

/// Counts principle advocacy codes in shared history and returns the modal
/// kind; ties resolve in canonical principle order.
pub fn modal_principle(history: &[HistoryEntry]) -> Option<PrincipleKind> {
    let mut counts = [0usize; 4];
    for entry in history {
        for (i, kind) in PrincipleKind::ALL.into_iter().enumerate() {
            if entry.text.contains(&format!("({})", kind.code())) {
                counts[i] += 1;
                break;
            }
        }
    }
    let best = counts.iter().copied().max()?;
    if best == 0 {
        return None;
    }
    PrincipleKind::ALL
        .into_iter()
        .zip(counts)
        .find(|(_, c)| *c == best)
        .map(|(k, _)| k)
}

/// Deterministic backend driven by a [`ScriptedProfile`].
pub struct ScriptedBackend {
    profile: ScriptedProfile,
}

impl ScriptedBackend {
    pub fn new(profile: ScriptedProfile) -> ScriptedBackend {
        ScriptedBackend { profile }
    }

    pub fn profile(&self) -> &ScriptedProfile {
        &self.profile
    }

    fn vote(&self, request: &BackendRequest<'_>) -> Principle {
        let chosen = match &self.profile.policy {
            ScriptedPolicy::Stubborn { principle } => principle.clone(),
            ScriptedPolicy::Conformist {
                initial,
                floor,
                range,
            } => match modal_principle(&request.observation.history) {
                Some(kind) if kind == initial.kind() => initial.clone(),
                Some(PrincipleKind::MaxAvgWithFloor) => {
                    Principle::with_floor(*floor).expect("non-negative default")
                }
                Some(PrincipleKind::MaxAvgWithRange) => {
                    Principle::with_range(*range).expect("non-negative default")
                }
                Some(kind) => Principle::new(kind, None).expect("unconstrained kind"),
                None => initial.clone(),
            },
        };
        // Corrective feedback from a failed constraint check wins over the
        // fixed value: resubmit with the achievable bound.
        if let Some(Feedback::ConstraintViolation { achievable, .. }) = request.feedback {
            if chosen.kind().requires_constraint() {
                return Principle::new(chosen.kind(), Some(*achievable))
                    .expect("achievable bound is non-negative");
            }
        }
        chosen
    }

    fn preferred(&self, request: &BackendRequest<'_>) -> Principle {
        self.vote(request)
    }

    fn statement(&self, request: &BackendRequest<'_>) -> String {
        let agent = &request.agent.name;
        let round = request.observation.round;
        let principle = self.preferred(request);
        let code = principle.kind().code();
        let stance = match &self.profile.policy {
            ScriptedPolicy::Stubborn { .. } => "My position is unchanged",
            ScriptedPolicy::Conformist { .. } => "Having heard the discussion so far",
        };
        let mut text = format!(
            "({code}) {stance}: in round {round} I, {agent}, support {principle} because \
             adopting it behind the veil protects every member of this group no matter \
             which income class the draw assigns. I ask the group to adopt it as our rule."
        );
        let min = request.observation.min_statement_chars;
        while text.chars().count() < min {
            text.push_str(" I restate my position for the record.");
        }
        text
    }

    fn confirmation(&self, request: &BackendRequest<'_>) -> bool {
        match self.profile.confirm {
            ConfirmStyle::Always => true,
            ConfirmStyle::Never => false,
            ConfirmStyle::OwnKindOnly => {
                let own = self.vote(request).kind();
                request
                    .observation
                    .revealed_votes
                    .iter()
                    .all(|v| v.principle.kind() == own)
            }
        }
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        let obs = request.observation;
        let raw = match obs.stage {
            Stage::RankingInitial
            | Stage::RankingInformed
            | Stage::RankingFinalIndividual
            | Stage::RankingPostGroup => {
                let top = self.preferred(request).kind();
                let mut order = vec![top];
                order.extend(PrincipleKind::ALL.into_iter().filter(|k| *k != top));
                let ids: Vec<&str> = order.iter().map(|k| k.id()).collect();
                let confidence = match self.profile.policy {
                    ScriptedPolicy::Stubborn { .. } => 5,
                    ScriptedPolicy::Conformist { .. } => 3,
                };
                json!({"ranking": ids, "confidence": confidence}).to_string()
            }
            Stage::ApplicationChoice | Stage::BallotVote => {
                let principle = self.vote(request);
                match principle.constraint() {
                    Some(c) => json!({"principle": principle.kind().id(), "constraint": c})
                        .to_string(),
                    None => json!({"principle": principle.kind().id()}).to_string(),
                }
            }
            Stage::Statement => json!({"statement": self.statement(request)}).to_string(),
            Stage::Readiness => {
                let ready = obs.round >= self.profile.ready_after_round;
                json!({"ready": ready}).to_string()
            }
            Stage::BallotConfirm => {
                json!({"confirm": self.confirmation(request)}).to_string()
            }
            Stage::MemoryUpdate => {
                let principle = self.preferred(request);
                let text = format!(
                    "{} notes, round {}: holding ({}) {}; {} shared statements heard so far.",
                    request.agent.name,
                    obs.round,
                    principle.kind().code(),
                    principle,
                    obs.history.len()
                );
                json!({"memory": text}).to_string()
            }
            Stage::PrivateAssessment => {
                let text = format!(
                    "Round {} private read: I am weighing the group's statements against my \
                     own stance and planning my vote accordingly. [{}-private-r{}]",
                    obs.round, request.agent.name, obs.round
                );
                json!({"assessment": text}).to_string()
            }
        };
        Ok(raw)
    }

    fn id(&self) -> String {
        match &self.profile.policy {
            ScriptedPolicy::Stubborn { principle } => format!("scripted:stubborn({principle})"),
            ScriptedPolicy::Conformist { initial, .. } => {
                format!("scripted:conformist({initial})")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentSpec, ChatMessage, Observation};

    fn spec() -> AgentSpec {
        AgentSpec {
            name: "Avery".into(),
            role_description: "student".into(),
            language: "english".into(),
            temperature: 0.0,
            backend: "scripted".into(),
            memory_limit: 2_000,
        }
    }

    fn complete(profile: ScriptedProfile, obs: &Observation) -> String {
        let backend = ScriptedBackend::new(profile);
        let agent = spec();
        let messages = [ChatMessage::user("task")];
        backend
            .complete(&BackendRequest {
                agent: &agent,
                messages: &messages,
                schema_kind: "x",
                observation: obs,
                feedback: None,
                attempt: 0,
            })
            .unwrap()
    }

    #[test]
    fn stubborn_always_votes_its_principle() {
        let profile = ScriptedProfile::stubborn(Principle::with_floor(10_000.0).unwrap());
        let obs = Observation::new(Stage::BallotVote).with_round(1);
        let raw = complete(profile, &obs);
        assert_eq!(
            raw,
            r#"{"constraint":10000.0,"principle":"max_avg_with_floor"}"#
        );
    }

    #[test]
    fn conformist_votes_the_modal_principle() {
        let entry = |speaker: &str, code: &str| HistoryEntry {
            round: 1,
            speaker: speaker.into(),
            text: format!("({code}) I support this principle."),
        };
        let history = vec![
            entry("B", "P2"),
            entry("C", "P2"),
            entry("D", "P2"),
            entry("E", "P1"),
        ];
        let profile = ScriptedProfile::conformist(Principle::max_floor());
        let obs = Observation::new(Stage::BallotVote)
            .with_round(1)
            .with_history(history);
        let raw = complete(profile, &obs);
        assert_eq!(raw, r#"{"principle":"max_average"}"#);
    }

    #[test]
    fn conformist_falls_back_to_initial_without_history() {
        let profile = ScriptedProfile::conformist(Principle::max_floor());
        let obs = Observation::new(Stage::BallotVote).with_round(1);
        assert_eq!(complete(profile, &obs), r#"{"principle":"max_floor"}"#);
    }

    #[test]
    fn readiness_threshold_controls_vote_initiation() {
        let profile = ScriptedProfile::stubborn(Principle::max_average()).ready_after(3);
        for (round, expected) in [(1, false), (2, false), (3, true), (4, true)] {
            let obs = Observation::new(Stage::Readiness).with_round(round);
            let raw = complete(profile.clone(), &obs);
            assert_eq!(raw, format!("{{\"ready\":{expected}}}"), "round {round}");
        }
    }

    #[test]
    fn constraint_feedback_resubmits_achievable_bound() {
        let backend =
            ScriptedBackend::new(ScriptedProfile::stubborn(Principle::with_floor(99_000.0).unwrap()));
        let agent = spec();
        let messages = [ChatMessage::user("task")];
        let obs = Observation::new(Stage::BallotVote).with_round(1);
        let feedback = Feedback::ConstraintViolation {
            achievable: 10_000.0,
            message: "max achievable floor = 10000".into(),
        };
        let raw = backend
            .complete(&BackendRequest {
                agent: &agent,
                messages: &messages,
                schema_kind: "ballot",
                observation: &obs,
                feedback: Some(&feedback),
                attempt: 1,
            })
            .unwrap();
        assert_eq!(
            raw,
            r#"{"constraint":10000.0,"principle":"max_avg_with_floor"}"#
        );
    }

    #[test]
    fn statements_meet_the_minimum_length() {
        let profile = ScriptedProfile::stubborn(Principle::max_floor());
        let obs = Observation::new(Stage::Statement)
            .with_round(2)
            .with_min_statement(400);
        let raw = complete(profile, &obs);
        let parsed: serde_json::Value = serde_json::from_str(&raw).unwrap();
        let text = parsed["statement"].as_str().unwrap();
        assert!(text.chars().count() >= 400);
        assert!(text.starts_with("(P1)"));
    }

    #[test]
    fn identical_inputs_yield_identical_bytes() {
        let profile = ScriptedProfile::conformist(Principle::max_average());
        let obs = Observation::new(Stage::MemoryUpdate).with_round(2);
        assert_eq!(complete(profile.clone(), &obs), complete(profile, &obs));
    }

    #[test]
    fn modal_count_ties_resolve_in_canonical_order() {
        let history = vec![
            HistoryEntry {
                round: 1,
                speaker: "A".into(),
                text: "(P3) floor constraint".into(),
            },
            HistoryEntry {
                round: 1,
                speaker: "B".into(),
                text: "(P1) worst off".into(),
            },
        ];
        assert_eq!(modal_principle(&history), Some(PrincipleKind::MaxFloor));
        assert_eq!(modal_principle(&[]), None);
    }
}
