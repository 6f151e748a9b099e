//! Transcript replay: reconstructs a group record from its event log alone
//! and re-derives every computed quantity, flagging mismatches.
//!
//! Replay is the tamper check and the provenance check in one: a transcript
//! whose recorded selections, payoffs, or outcome cannot be recomputed from
//! its own recorded inputs is reported with the discrepancy.

use std::collections::BTreeMap;

use crate::agent::Ranking;
use crate::deliberation::{GroupOutcome, OutcomeResult, Resolution};
use crate::domain::{
    compute_payoff, counterfactual_payoffs, evaluate_principle, scale_situation, BankBalance,
    Money, PrincipleKind, Situation,
};
use crate::records::{ApplicationRound, GroupRecord, IndividualRecord, RankingTag};
use crate::transcript::{
    genesis_of, parse_payload, BallotCastPayload, BallotRevealedPayload, ConfirmationCastPayload,
    EventKind, OutcomePayload, PayoffPayload, RankingPayload, SeedDrawPayload, StatementPayload,
    TranscriptEvent,
};

/// Result of replaying one transcript.
#[derive(Debug)]
pub struct ReplayReport {
    pub group_id: String,
    /// Reconstructed record; absent when the transcript ends before the
    /// outcome (an aborted group).
    pub record: Option<GroupRecord>,
    pub aborted: bool,
    pub issues: Vec<String>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

fn verify_ranking(agent: &str, tag: RankingTag, ranking: &Ranking, issues: &mut Vec<String>) {
    for kind in PrincipleKind::ALL {
        if !ranking.order.contains(&kind) {
            issues.push(format!(
                "{agent} {tag}: ranking is not a permutation (missing {kind})"
            ));
        }
    }
    if !(1..=5).contains(&ranking.confidence) {
        issues.push(format!(
            "{agent} {tag}: confidence {} outside 1-5",
            ranking.confidence
        ));
    }
}

fn verify_payoff(payload: &PayoffPayload, issues: &mut Vec<String>) {
    let where_ = format!(
        "{} {} payoff (round {:?})",
        payload.agent, payload.phase, payload.round
    );
    if let Some(principle) = &payload.principle {
        match evaluate_principle(principle, &payload.situation) {
            Ok(label) if label == payload.selected => {}
            Ok(label) => issues.push(format!(
                "{where_}: recorded selection {} but {principle} selects {label}",
                payload.selected
            )),
            Err(e) => issues.push(format!("{where_}: selection cannot be re-derived: {e}")),
        }
    } else if payload.situation.distribution(&payload.selected).is_err() {
        issues.push(format!(
            "{where_}: drawn distribution `{}` not in the situation",
            payload.selected
        ));
    }
    match payload.situation.distribution(&payload.selected) {
        Ok(distribution) => {
            let income = distribution.income_for_class(payload.drawn_class);
            if income != payload.income {
                issues.push(format!(
                    "{where_}: recorded income {} but class {} of {} earns {income}",
                    payload.income, payload.drawn_class, payload.selected
                ));
            }
        }
        Err(e) => issues.push(format!("{where_}: {e}")),
    }
    let expected_payoff = compute_payoff(payload.income.max(0.0), payload.scale.max(1.0));
    if expected_payoff != payload.payoff {
        issues.push(format!(
            "{where_}: recorded payoff {} but income {} at scale {} pays {expected_payoff}",
            payload.payoff, payload.income, payload.scale
        ));
    }
    match counterfactual_payoffs(
        &payload.situation,
        payload.drawn_class,
        &payload.counterfactual_principles,
        payload.scale,
    ) {
        Ok(expected) if expected == payload.counterfactuals => {}
        Ok(expected) => issues.push(format!(
            "{where_}: counterfactuals do not recompute ({expected:?} vs {:?})",
            payload.counterfactuals
        )),
        Err(e) => issues.push(format!("{where_}: counterfactuals cannot be re-derived: {e}")),
    }
}

fn verify_outcome(
    outcome: &GroupOutcome,
    ballots: &BTreeMap<u32, Vec<BallotCastPayload>>,
    confirmations: &BTreeMap<u32, Vec<ConfirmationCastPayload>>,
    fallback_event: Option<&SeedDrawPayload>,
    issues: &mut Vec<String>,
) {
    match &outcome.result {
        OutcomeResult::Consensus { principle } => {
            if outcome.resolution != Resolution::Ballot {
                issues.push("consensus outcome must resolve by ballot".into());
            }
            if outcome.fallback_principle.is_some() || outcome.fallback_distribution.is_some() {
                issues.push("consensus outcome must not carry a fallback".into());
            }
            let Some((_, casts)) = ballots.iter().next_back() else {
                issues.push("consensus outcome without any ballot casts".into());
                return;
            };
            if !casts.iter().all(|c| c.principle.kind() == principle.kind()) {
                issues.push("consensus principle does not match the final ballot votes".into());
            }
            let last_ballot = *ballots.keys().next_back().unwrap();
            match confirmations.get(&last_ballot) {
                Some(entries) if entries.iter().all(|c| c.confirm) => {}
                _ => issues.push("consensus without a unanimous confirmation stage".into()),
            }
        }
        OutcomeResult::NoAgreement => {
            if outcome.resolution != Resolution::MaxRoundsExhausted {
                issues.push("no-agreement outcome must resolve as max-rounds-exhausted".into());
            }
            let has_fallback = outcome.fallback_principle.is_some()
                || outcome.fallback_distribution.is_some();
            if !has_fallback {
                issues.push("no-agreement outcome lacks a fallback draw".into());
            }
            match fallback_event {
                Some(SeedDrawPayload::Fallback {
                    principle,
                    distribution,
                }) => {
                    if principle != &outcome.fallback_principle
                        || distribution != &outcome.fallback_distribution
                    {
                        issues.push("fallback draw event disagrees with the outcome".into());
                    }
                }
                _ => issues.push("no-agreement outcome without a fallback draw event".into()),
            }
        }
    }
}

/// Replays one transcript. Structural validity (parse, schema version,
/// sequence gaps) is assumed checked by the reader; everything else is
/// re-derived here.
pub fn replay_transcript(events: &[TranscriptEvent]) -> ReplayReport {
    let group_id = events
        .first()
        .map(|e| e.group_id.clone())
        .unwrap_or_default();
    let mut issues = Vec::new();
    let aborted = events.iter().any(|e| e.kind == EventKind::Failure);

    let Some(SeedDrawPayload::GroupSeed {
        group_index,
        seed_hex,
        language,
        agents,
        application_order: _,
        group_base,
    }) = genesis_of(events)
    else {
        return ReplayReport {
            group_id,
            record: None,
            aborted,
            issues: vec!["transcript has no group genesis event".into()],
        };
    };

    let mut temperatures: BTreeMap<String, f64> = BTreeMap::new();
    let mut scale_factor: Option<f64> = None;
    let mut fallback_event: Option<SeedDrawPayload> = None;
    let mut rankings: BTreeMap<(String, RankingTag), Ranking> = BTreeMap::new();
    let mut application_payoffs: BTreeMap<String, Vec<PayoffPayload>> = BTreeMap::new();
    let mut binding_payoffs: BTreeMap<String, PayoffPayload> = BTreeMap::new();
    let mut statements = Vec::new();
    let mut ballots: BTreeMap<u32, Vec<BallotCastPayload>> = BTreeMap::new();
    let mut confirmations: BTreeMap<u32, Vec<ConfirmationCastPayload>> = BTreeMap::new();
    let mut reveals: BTreeMap<u32, BallotRevealedPayload> = BTreeMap::new();
    let mut outcome: Option<GroupOutcome> = None;

    for event in events {
        match event.kind {
            EventKind::SeedDrawn => match parse_payload::<SeedDrawPayload>(event) {
                Some(SeedDrawPayload::Temperature { agent, value, .. }) => {
                    temperatures.insert(agent, value);
                }
                Some(SeedDrawPayload::ScaleFactor { factor }) => scale_factor = Some(factor),
                Some(payload @ SeedDrawPayload::Fallback { .. }) => {
                    fallback_event = Some(payload)
                }
                _ => {}
            },
            EventKind::RankingRecorded => {
                if let Some(p) = parse_payload::<RankingPayload>(event) {
                    verify_ranking(&p.agent, p.tag, &p.ranking, &mut issues);
                    rankings.insert((p.agent, p.tag), p.ranking);
                }
            }
            EventKind::PayoffCredited => {
                if let Some(p) = parse_payload::<PayoffPayload>(event) {
                    verify_payoff(&p, &mut issues);
                    if p.phase == "binding" {
                        binding_payoffs.insert(p.agent.clone(), p);
                    } else {
                        application_payoffs.entry(p.agent.clone()).or_default().push(p);
                    }
                } else {
                    issues.push(format!("seq {}: unreadable payoff payload", event.seq));
                }
            }
            EventKind::StatementAccepted => {
                if let Some(p) = parse_payload::<StatementPayload>(event) {
                    statements.push(crate::agent::HistoryEntry {
                        round: p.round,
                        speaker: p.speaker,
                        text: p.statement,
                    });
                }
            }
            EventKind::BallotCast => {
                if let Some(p) = parse_payload::<BallotCastPayload>(event) {
                    ballots.entry(p.ballot).or_default().push(p);
                }
            }
            EventKind::BallotRevealed => {
                if let Some(p) = parse_payload::<BallotRevealedPayload>(event) {
                    reveals.insert(p.ballot, p);
                }
            }
            EventKind::ConfirmationCast => {
                if let Some(p) = parse_payload::<ConfirmationCastPayload>(event) {
                    confirmations.entry(p.ballot).or_default().push(p);
                }
            }
            EventKind::OutcomeDecided => {
                if let Some(p) = parse_payload::<OutcomePayload>(event) {
                    outcome = Some(p.outcome);
                }
            }
            _ => {}
        }
    }

    // Cross-check reveals against casts.
    for (ballot, casts) in &ballots {
        match reveals.get(ballot) {
            None => issues.push(format!("ballot {ballot} has casts but no reveal")),
            Some(reveal) => {
                for cast in casts {
                    if reveal.entries.get(&cast.agent) != Some(&cast.principle) {
                        issues.push(format!(
                            "ballot {ballot}: reveal disagrees with {}'s cast",
                            cast.agent
                        ));
                    }
                }
            }
        }
    }

    let Some(outcome) = outcome else {
        if !aborted {
            issues.push("transcript ends without an outcome and without a failure".into());
        }
        return ReplayReport {
            group_id,
            record: None,
            aborted,
            issues,
        };
    };
    verify_outcome(&outcome, &ballots, &confirmations, fallback_event.as_ref(), &mut issues);

    // Binding situation must be the base scaled by the recorded factor.
    let mut binding_name = String::new();
    if let Some(factor) = scale_factor {
        match scale_situation(&group_base, factor) {
            Ok(expected) => {
                binding_name = expected.name().to_string();
                for payload in binding_payoffs.values() {
                    if payload.situation != expected {
                        issues.push(format!(
                            "{}: binding situation is not the base scaled by {factor}",
                            payload.agent
                        ));
                    }
                }
            }
            Err(e) => issues.push(format!("recorded scale factor invalid: {e}")),
        }
    } else {
        issues.push("transcript has no scale factor draw".into());
    }

    // Assemble per-agent records and audit balances.
    let mut individuals = Vec::new();
    for spec in &agents {
        let name = &spec.name;
        let mut agent_rankings = BTreeMap::new();
        for tag in [RankingTag::R1, RankingTag::R2, RankingTag::R3] {
            match rankings.get(&(name.clone(), tag)) {
                Some(r) => {
                    agent_rankings.insert(tag, *r);
                }
                None => issues.push(format!("{name}: missing ranking {tag}")),
            }
        }
        let payoffs = application_payoffs.remove(name).unwrap_or_default();
        if payoffs.len() != 4 {
            issues.push(format!(
                "{name}: {} application rounds recorded, expected 4",
                payoffs.len()
            ));
        }
        let mut balance = BankBalance::new();
        let mut application_rounds = Vec::new();
        for payload in payoffs {
            balance.credit(
                format!("application-{}", payload.round.unwrap_or_default()),
                payload.payoff,
            );
            if balance.total() != payload.balance_after {
                issues.push(format!(
                    "{name}: balance after application round {:?} does not chain",
                    payload.round
                ));
            }
            application_rounds.push(ApplicationRound {
                round: payload.round.unwrap_or_default(),
                situation: situation_base_name(&payload.situation),
                outcome: crate::domain::PayoffOutcome {
                    principle: payload.principle,
                    selected_distribution: payload.selected,
                    drawn_class: payload.drawn_class,
                    income: payload.income,
                    payoff: payload.payoff,
                    counterfactuals: payload.counterfactuals,
                },
            });
        }
        if let Some(binding) = binding_payoffs.get(name) {
            balance.credit("binding", binding.payoff);
            if balance.total() != binding.balance_after {
                issues.push(format!("{name}: balance after binding payoff does not chain"));
            }
        } else {
            issues.push(format!("{name}: missing binding payoff"));
        }
        individuals.push(IndividualRecord {
            agent: name.clone(),
            rankings: agent_rankings,
            application_rounds,
            balance,
        });
    }

    let mut final_rankings = BTreeMap::new();
    for spec in &agents {
        match rankings.get(&(spec.name.clone(), RankingTag::R4)) {
            Some(r) => {
                final_rankings.insert(spec.name.clone(), *r);
            }
            None => issues.push(format!("{}: missing ranking R4", spec.name)),
        }
    }

    let record = GroupRecord {
        group_id: group_id.clone(),
        group_index,
        seed_hex,
        language,
        agents,
        temperatures,
        individuals,
        statements,
        outcome,
        scale_factor: scale_factor.unwrap_or_default(),
        binding_situation: binding_name,
        binding_payoffs: binding_payoffs
            .into_iter()
            .map(|(agent, p)| {
                (
                    agent,
                    crate::domain::PayoffOutcome {
                        principle: p.principle,
                        selected_distribution: p.selected,
                        drawn_class: p.drawn_class,
                        income: p.income,
                        payoff: p.payoff,
                        counterfactuals: p.counterfactuals,
                    },
                )
            })
            .collect(),
        final_rankings,
    };

    ReplayReport {
        group_id,
        record: Some(record),
        aborted,
        issues,
    }
}

/// Application payloads embed the unscaled situation; its name is the
/// dataset name.
fn situation_base_name(situation: &Situation) -> String {
    situation.name().to_string()
}

/// Checks that the per-agent balances-by-payoff identity holds for a
/// completed record: final balance = sum of application payoffs plus the
/// binding payoff, to the cent.
pub fn audit_balances(record: &GroupRecord) -> Vec<String> {
    let mut issues = Vec::new();
    for individual in &record.individuals {
        let applications: Money = individual
            .application_rounds
            .iter()
            .map(|r| r.outcome.payoff)
            .sum();
        let binding = record
            .binding_payoffs
            .get(&individual.agent)
            .map(|p| p.payoff)
            .unwrap_or(Money(0));
        if individual.balance.total() != applications + binding {
            issues.push(format!(
                "{}: balance {} != applications {} + binding {}",
                individual.agent,
                individual.balance.total(),
                applications,
                binding
            ));
        }
        let from_deltas: Money = individual.balance.history().iter().map(|d| d.delta).sum();
        if from_deltas != individual.balance.total() {
            issues.push(format!("{}: balance history does not sum", individual.agent));
        }
    }
    issues
}
