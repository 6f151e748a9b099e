//! The group-phase protocol state machine: randomized turn-taking, bounded
//! shared history, private per-round assessments, vote-readiness polling,
//! a two-stage secret ballot with unanimity, and the no-agreement fallback.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Observation, Phase, ResponseSchema, RevealedVote, Stage};
use crate::domain::{validate_constraint, ConstraintCheck, Principle, PrincipleKind, Situation};
use crate::prompts::render;
use crate::rng::GroupRng;
use crate::transcript::{
    to_payload, BallotCastPayload, BallotRevealedPayload, ConfirmationCastPayload, EventKind,
    OutcomePayload, ReadinessPayload, SeedDrawPayload, StatementPayload, Visibility,
};
use crate::workflow::{GroupError, GroupSession};

pub use crate::agent::HistoryEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliberationPhase {
    Speaking,
    ReadinessPoll,
    Ballot,
    Confirmation,
    Concluded,
}

/// Mutable state of one group's deliberation.
#[derive(Debug, Clone)]
pub struct DeliberationState {
    pub round: u32,
    pub max_rounds: u32,
    pub speaking_order: Vec<String>,
    pub history: Vec<HistoryEntry>,
    pub history_char_cap: usize,
    pub phase: DeliberationPhase,
}

impl DeliberationState {
    pub fn new(max_rounds: u32, history_char_cap: usize) -> DeliberationState {
        DeliberationState {
            round: 1,
            max_rounds,
            speaking_order: Vec::new(),
            history: Vec::new(),
            history_char_cap,
            phase: DeliberationPhase::Speaking,
        }
    }
}

/// One recorded ballot stage; entries are immutable once collected and are
/// revealed only after every member has submitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "stage")]
pub enum BallotRecord {
    Vote { entries: BTreeMap<String, Principle> },
    Confirmation { entries: BTreeMap<String, bool> },
}

/// Result of one two-stage ballot.
#[derive(Debug, Clone)]
pub struct BallotOutcome {
    pub vote_record: BallotRecord,
    pub confirmation_record: Option<BallotRecord>,
    pub consensus: Option<Principle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision")]
pub enum OutcomeResult {
    Consensus { principle: Principle },
    NoAgreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Ballot,
    MaxRoundsExhausted,
}

/// Final group result. A `NoAgreement` outcome always carries the randomly
/// drawn fallback (a principle by default, a distribution label when the
/// fallback policy is configured to draw distributions directly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub result: OutcomeResult,
    pub rounds_used: u32,
    pub resolution: Resolution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_principle: Option<Principle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_distribution: Option<String>,
}

impl GroupOutcome {
    pub fn consensus(principle: Principle, rounds_used: u32) -> GroupOutcome {
        GroupOutcome {
            result: OutcomeResult::Consensus { principle },
            rounds_used,
            resolution: Resolution::Ballot,
            fallback_principle: None,
            fallback_distribution: None,
        }
    }

    pub fn is_consensus(&self) -> bool {
        matches!(self.result, OutcomeResult::Consensus { .. })
    }

    pub fn consensus_principle(&self) -> Option<&Principle> {
        match &self.result {
            OutcomeResult::Consensus { principle } => Some(principle),
            OutcomeResult::NoAgreement => None,
        }
    }
}

/// Uniform random permutation of the group, re-drawn until this round's
/// first speaker differs from the previous round's last speaker.
pub fn next_speaking_order(
    names: &[String],
    previous: Option<&[String]>,
    rng: &mut GroupRng,
) -> Vec<String> {
    assert!(names.len() >= 2, "speaking order needs at least two agents");
    let forbidden_first = previous.and_then(|p| p.last());
    loop {
        let mut order: Vec<String> = names.to_vec();
        order.shuffle(rng);
        if forbidden_first.is_none_or(|last| order.first() != Some(last)) {
            return order;
        }
    }
}

/// Renders the newest statements that fit within `cap` characters, dropping
/// the oldest first. When anything is dropped, a marker line (from
/// `elided_template`, with `{count}`) notes how many statements were elided;
/// if even the marker cannot fit alongside the newest statement, the marker
/// is sacrificed so the latest statement survives whenever it alone fits.
pub fn render_history(history: &[HistoryEntry], cap: usize, elided_template: &str) -> String {
    assert!(cap > 0, "history cap must be positive");
    let lines: Vec<String> = history
        .iter()
        .map(|e| format!("[Round {}] {}: {}", e.round, e.speaker, e.text))
        .collect();
    if lines.is_empty() {
        return String::new();
    }
    // Keep the longest suffix of statements that fits together with the
    // elision marker.
    for dropped in 0..lines.len() {
        let mut parts: Vec<&str> = Vec::new();
        let marker;
        if dropped > 0 {
            marker = render(elided_template, &[("count", &dropped.to_string())]);
            parts.push(&marker);
        }
        parts.extend(lines[dropped..].iter().map(String::as_str));
        let total: usize =
            parts.iter().map(|p| p.chars().count()).sum::<usize>() + parts.len().saturating_sub(1);
        if total <= cap {
            return parts.join("\n");
        }
    }
    // No suffix fits alongside its marker: a surviving latest statement
    // beats a bare marker.
    let last = lines.last().expect("non-empty history");
    if last.chars().count() <= cap {
        return last.clone();
    }
    let marker = render(elided_template, &[("count", &lines.len().to_string())]);
    if marker.chars().count() <= cap {
        marker
    } else {
        String::new()
    }
}

/// One agent's turn: a private strategic assessment (kept out of shared
/// history), then a validated statement appended to the history. Returns the
/// assessment so the round's memory checkpoint can offer it back to the agent.
pub fn speaking_turn(
    session: &mut GroupSession<'_>,
    state: &mut DeliberationState,
    speaker_idx: usize,
) -> Result<String, GroupError> {
    let min_chars = session.params.min_statement_chars;
    let assess_obs = Observation::new(Stage::PrivateAssessment)
        .with_phase(Phase::Group)
        .with_round(state.round)
        .with_history(state.history.clone())
        .with_min_statement(min_chars);
    let assess_task = session.templates.task(Stage::PrivateAssessment)?.to_string();
    let assessment = session
        .elicit(speaker_idx, &assess_obs, &ResponseSchema::PrivateAssessment, &assess_task)?
        .into_text();

    let statement_obs = Observation::new(Stage::Statement)
        .with_phase(Phase::Group)
        .with_round(state.round)
        .with_history(state.history.clone())
        .with_min_statement(min_chars);
    let statement_task = render(
        session.templates.task(Stage::Statement)?,
        &[
            ("round", &state.round.to_string()),
            ("min", &min_chars.to_string()),
        ],
    );
    let statement = session
        .elicit(
            speaker_idx,
            &statement_obs,
            &ResponseSchema::Statement { min_chars },
            &statement_task,
        )?
        .into_text();

    let speaker = session.agents[speaker_idx].spec.name.clone();
    state.history.push(HistoryEntry {
        round: state.round,
        speaker: speaker.clone(),
        text: statement.clone(),
    });
    session.record_event(
        EventKind::StatementAccepted,
        Visibility::Shared,
        to_payload(&StatementPayload {
            round: state.round,
            speaker,
            statement,
        }),
    );
    Ok(assessment)
}

/// Secret per-agent readiness poll; true iff every member is ready.
/// Individual answers are recorded but not shown to other agents.
pub fn poll_readiness(
    session: &mut GroupSession<'_>,
    state: &DeliberationState,
) -> Result<bool, GroupError> {
    assert!(!session.agents.is_empty(), "readiness poll needs agents");
    let task = session.templates.task(Stage::Readiness)?.to_string();
    let mut answers = BTreeMap::new();
    for idx in 0..session.agents.len() {
        let obs = Observation::new(Stage::Readiness)
            .with_phase(Phase::Group)
            .with_round(state.round)
            .with_history(state.history.clone());
        let ready = session
            .elicit(idx, &obs, &ResponseSchema::Readiness, &task)?
            .into_bool();
        answers.insert(session.agents[idx].spec.name.clone(), ready);
    }
    let all_ready = answers.values().all(|r| *r);
    session.record_event(
        EventKind::ReadinessPolled,
        Visibility::Experimenter,
        to_payload(&ReadinessPayload {
            round: state.round,
            answers,
            all_ready,
        }),
    );
    Ok(all_ready)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("constraints are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Two-stage secret ballot: hidden simultaneous votes (constraint values
/// validated with corrective re-prompts), reveal, and — when all five kinds
/// agree — a hidden unanimous confirmation. The group constraint value is
/// the median of the submitted values, re-validated before adoption.
pub fn run_ballot(
    session: &mut GroupSession<'_>,
    state: &mut DeliberationState,
    ballot_index: u32,
    situation_for_validation: &Situation,
) -> Result<BallotOutcome, GroupError> {
    state.phase = DeliberationPhase::Ballot;
    let task = session.templates.task(Stage::BallotVote)?.to_string();
    let mut entries: BTreeMap<String, Principle> = BTreeMap::new();
    for idx in 0..session.agents.len() {
        let obs = Observation::new(Stage::BallotVote)
            .with_phase(Phase::Group)
            .with_round(state.round)
            .with_history(state.history.clone());
        let schema = ResponseSchema::Ballot {
            situation: situation_for_validation.clone(),
        };
        let vote = session.elicit(idx, &obs, &schema, &task)?.into_choice();
        let name = session.agents[idx].spec.name.clone();
        session.record_event(
            EventKind::BallotCast,
            Visibility::PrivateTo(name.clone()),
            to_payload(&BallotCastPayload {
                ballot: ballot_index,
                agent: name.clone(),
                principle: vote.clone(),
            }),
        );
        entries.insert(name, vote);
    }

    let kinds: Vec<PrincipleKind> = entries.values().map(Principle::kind).collect();
    let unanimous_kind = if kinds.windows(2).all(|w| w[0] == w[1]) {
        kinds.first().copied()
    } else {
        None
    };
    session.record_event(
        EventKind::BallotRevealed,
        Visibility::Shared,
        to_payload(&BallotRevealedPayload {
            ballot: ballot_index,
            entries: entries.clone(),
            unanimous_kind,
        }),
    );
    let vote_record = BallotRecord::Vote {
        entries: entries.clone(),
    };

    let Some(kind) = unanimous_kind else {
        return Ok(BallotOutcome {
            vote_record,
            confirmation_record: None,
            consensus: None,
        });
    };

    let group_principle = if kind.requires_constraint() {
        let values: Vec<f64> = entries
            .values()
            .filter_map(Principle::constraint)
            .collect();
        let candidate = Principle::new(kind, Some(median(values)))?;
        match validate_constraint(&candidate, situation_for_validation)? {
            ConstraintCheck::Ok => candidate,
            ConstraintCheck::Violation { message, .. } => {
                // Unreachable for medians of individually feasible values;
                // surfaced as a fault rather than silently adopted.
                return Err(GroupError::InvalidGroupConstraint { message });
            }
        }
    } else {
        Principle::new(kind, None)?
    };

    state.phase = DeliberationPhase::Confirmation;
    let revealed: Vec<RevealedVote> = entries
        .iter()
        .map(|(agent, principle)| RevealedVote {
            agent: agent.clone(),
            principle: principle.clone(),
        })
        .collect();
    let votes_text = crate::agent::schema::render_votes(&revealed);
    let confirm_task = render(
        session.templates.task(Stage::BallotConfirm)?,
        &[("votes", votes_text.as_str())],
    );
    let mut confirmations: BTreeMap<String, bool> = BTreeMap::new();
    for idx in 0..session.agents.len() {
        let obs = Observation::new(Stage::BallotConfirm)
            .with_phase(Phase::Group)
            .with_round(state.round)
            .with_history(state.history.clone())
            .with_revealed(revealed.clone());
        let confirm = session
            .elicit(idx, &obs, &ResponseSchema::Confirmation, &confirm_task)?
            .into_bool();
        let name = session.agents[idx].spec.name.clone();
        session.record_event(
            EventKind::ConfirmationCast,
            Visibility::PrivateTo(name.clone()),
            to_payload(&ConfirmationCastPayload {
                ballot: ballot_index,
                agent: name.clone(),
                confirm,
            }),
        );
        confirmations.insert(name, confirm);
    }
    let consensus = confirmations.values().all(|c| *c).then_some(group_principle);
    Ok(BallotOutcome {
        vote_record,
        confirmation_record: Some(BallotRecord::Confirmation {
            entries: confirmations,
        }),
        consensus,
    })
}

fn draw_fallback(
    session: &mut GroupSession<'_>,
    situation: &Situation,
) -> Result<(Option<Principle>, Option<String>), GroupError> {
    let policy = &session.params.fallback;
    if policy.draw_distribution {
        let labels: Vec<String> = situation
            .distributions()
            .iter()
            .map(|d| d.label().to_string())
            .collect();
        let label = labels[session.rng.random_range(0..labels.len())].clone();
        session.record_event(
            EventKind::SeedDrawn,
            Visibility::Experimenter,
            to_payload(&SeedDrawPayload::Fallback {
                principle: None,
                distribution: Some(label.clone()),
            }),
        );
        Ok((None, Some(label)))
    } else {
        let kind = PrincipleKind::ALL[session.rng.random_range(0..PrincipleKind::ALL.len())];
        let principle = match kind {
            PrincipleKind::MaxAvgWithFloor => Principle::with_floor(policy.default_floor)?,
            PrincipleKind::MaxAvgWithRange => Principle::with_range(policy.default_range)?,
            other => Principle::new(other, None)?,
        };
        session.record_event(
            EventKind::SeedDrawn,
            Visibility::Experimenter,
            to_payload(&SeedDrawPayload::Fallback {
                principle: Some(principle.clone()),
                distribution: None,
            }),
        );
        Ok((Some(principle), None))
    }
}

/// The full deliberation loop: speaking rounds with end-of-round memory
/// checkpoints and readiness polls, voluntary ballots when all members are
/// ready, one forced final ballot at the round cap, and the random fallback
/// when that ballot also fails.
pub fn run_deliberation(
    session: &mut GroupSession<'_>,
    situation_for_validation: &Situation,
) -> Result<(GroupOutcome, DeliberationState), GroupError> {
    assert_eq!(
        session.agents.len(),
        session.params.group_size,
        "deliberation requires a full group"
    );
    let mut state = DeliberationState::new(
        session.params.max_rounds,
        session.params.history_char_cap,
    );
    let names: Vec<String> = session.agents.iter().map(|a| a.spec.name.clone()).collect();
    let mut ballot_index = 0u32;
    let mut previous_order: Option<Vec<String>> = None;

    for round in 1..=state.max_rounds {
        state.round = round;
        state.phase = DeliberationPhase::Speaking;
        let order = next_speaking_order(&names, previous_order.as_deref(), &mut session.rng);
        session.record_event(
            EventKind::SeedDrawn,
            Visibility::Experimenter,
            to_payload(&SeedDrawPayload::SpeakingOrder {
                round,
                order: order.clone(),
            }),
        );
        state.speaking_order = order.clone();

        let mut assessments: BTreeMap<String, String> = BTreeMap::new();
        for name in &order {
            let idx = names.iter().position(|n| n == name).expect("member name");
            let assessment = speaking_turn(session, &mut state, idx)?;
            assessments.insert(name.clone(), assessment);
        }
        for (idx, name) in names.iter().enumerate() {
            let own_assessment = assessments.get(name).cloned().unwrap_or_default();
            session.discussion_memory_checkpoint(idx, &state, &own_assessment)?;
        }

        state.phase = DeliberationPhase::ReadinessPoll;
        if round >= session.params.min_rounds_before_vote {
            let all_ready = poll_readiness(session, &state)?;
            if all_ready {
                ballot_index += 1;
                let ballot = run_ballot(session, &mut state, ballot_index, situation_for_validation)?;
                if let Some(principle) = ballot.consensus {
                    state.phase = DeliberationPhase::Concluded;
                    let outcome = GroupOutcome::consensus(principle, round);
                    session.record_event(
                        EventKind::OutcomeDecided,
                        Visibility::Shared,
                        to_payload(&OutcomePayload {
                            outcome: outcome.clone(),
                        }),
                    );
                    return Ok((outcome, state));
                }
            }
        }
        previous_order = Some(order);
    }

    // Round cap reached: one forced final ballot before declaring failure.
    ballot_index += 1;
    let forced = run_ballot(session, &mut state, ballot_index, situation_for_validation)?;
    let outcome = if let Some(principle) = forced.consensus {
        GroupOutcome::consensus(principle, state.max_rounds)
    } else {
        let (fallback_principle, fallback_distribution) =
            draw_fallback(session, situation_for_validation)?;
        GroupOutcome {
            result: OutcomeResult::NoAgreement,
            rounds_used: state.max_rounds,
            resolution: Resolution::MaxRoundsExhausted,
            fallback_principle,
            fallback_distribution,
        }
    };
    state.phase = DeliberationPhase::Concluded;
    session.record_event(
        EventKind::OutcomeDecided,
        Visibility::Shared,
        to_payload(&OutcomePayload {
            outcome: outcome.clone(),
        }),
    );
    Ok((outcome, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn names(n: usize) -> Vec<String> {
        ["Avery", "Blake", "Carmen", "Devin", "Elliot"]
            .iter()
            .take(n)
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn speaking_order_is_seeded_and_deterministic() {
        let names = names(5);
        let mut a = GroupRng::seed_from_u64(11);
        let mut b = GroupRng::seed_from_u64(11);
        assert_eq!(
            next_speaking_order(&names, None, &mut a),
            next_speaking_order(&names, None, &mut b)
        );
    }

    #[test]
    fn first_speaker_never_repeats_previous_last() {
        let names = names(5);
        for seed in 0..10_000u64 {
            let mut rng = GroupRng::seed_from_u64(seed);
            let previous = next_speaking_order(&names, None, &mut rng);
            let next = next_speaking_order(&names, Some(&previous), &mut rng);
            assert_ne!(next.first(), previous.last(), "seed {seed}");
            let mut sorted = next.clone();
            sorted.sort();
            let mut expected = names.clone();
            expected.sort();
            assert_eq!(sorted, expected, "each agent exactly once");
        }
    }

    #[test]
    fn two_agent_order_is_forced_by_the_constraint() {
        let names = names(2);
        for seed in 0..200u64 {
            let mut rng = GroupRng::seed_from_u64(seed);
            let previous = vec!["Avery".to_string(), "Blake".to_string()];
            let next = next_speaking_order(&names, Some(&previous), &mut rng);
            assert_eq!(next, vec!["Avery".to_string(), "Blake".to_string()]);
        }
    }

    const ELIDED: &str = "[{count} earlier statements omitted]";

    fn entry(round: u32, speaker: &str, text: &str) -> HistoryEntry {
        HistoryEntry {
            round,
            speaker: speaker.into(),
            text: text.into(),
        }
    }

    #[test]
    fn empty_history_renders_empty() {
        assert_eq!(render_history(&[], 100, ELIDED), "");
    }

    #[test]
    fn full_history_renders_without_marker() {
        let history = vec![entry(1, "Avery", "hello"), entry(1, "Blake", "hi")];
        let text = render_history(&history, 1_000, ELIDED);
        assert_eq!(text, "[Round 1] Avery: hello\n[Round 1] Blake: hi");
    }

    #[test]
    fn oldest_statements_are_elided_first_with_marker() {
        let history = vec![
            entry(1, "Avery", "a rather long opening statement"),
            entry(1, "Blake", "short"),
            entry(2, "Carmen", "closing"),
        ];
        let text = render_history(&history, 80, ELIDED);
        assert!(text.starts_with("[1 earlier statements omitted]"), "{text}");
        assert!(text.contains("Carmen: closing"));
        assert!(!text.contains("Avery"));
    }

    #[test]
    fn marker_is_sacrificed_when_only_the_latest_fits() {
        let history = vec![
            entry(1, "Avery", "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa"),
            entry(2, "Blake", "tail"),
        ];
        // "[Round 2] Blake: tail" is 21 chars; marker + line would exceed 25.
        let text = render_history(&history, 25, ELIDED);
        assert_eq!(text, "[Round 2] Blake: tail");
    }

    proptest::proptest! {
        #[test]
        fn rendered_history_never_exceeds_cap(
            texts in proptest::collection::vec("[a-z ]{0,50}", 0..20),
            cap in 1usize..400,
        ) {
            let history: Vec<HistoryEntry> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| entry(i as u32 / 5 + 1, "Avery", t))
                .collect();
            let text = render_history(&history, cap, ELIDED);
            proptest::prop_assert!(text.chars().count() <= cap);
        }

        #[test]
        fn latest_statement_survives_whenever_it_fits(
            texts in proptest::collection::vec("[a-z]{1,30}", 1..15),
            cap in 30usize..200,
        ) {
            let history: Vec<HistoryEntry> =
                texts.iter().map(|t| entry(1, "A", t)).collect();
            let last_line = format!("[Round 1] A: {}", texts.last().unwrap());
            let text = render_history(&history, cap, ELIDED);
            if last_line.chars().count() <= cap {
                proptest::prop_assert!(text.contains(&last_line));
            }
        }
    }

    #[test]
    fn median_of_odd_and_even_sets() {
        assert_eq!(median(vec![8_000.0, 12_000.0, 9_000.0, 11_000.0, 10_000.0]), 10_000.0);
        assert_eq!(median(vec![4.0, 8.0]), 6.0);
    }
}
