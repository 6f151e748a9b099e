//! Event-sourced transcripts: the single source of truth for a run.
//!
//! Every prompt, response, retry, ballot, payoff, and random decision is
//! recorded as one line-delimited JSON event with a per-group monotonic
//! sequence number. Analysis and replay are pure folds over these events.
//! Timestamps are informational only; canonical mode omits them so equal
//! runs produce byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{AgentSpec, Ranking};
use crate::deliberation::GroupOutcome;
use crate::domain::{Money, Principle, PrincipleKind, Situation};
use crate::records::RankingTag;

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("failed to read transcript {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("transcript line {line} is not a valid event: {detail}")]
    Parse { line: usize, detail: String },
    #[error("sequence gap at line {line}: expected seq {expected}, found {found}")]
    Gap {
        line: usize,
        expected: u64,
        found: u64,
    },
    #[error("unsupported transcript schema version {version} at line {line}")]
    UnsupportedVersion { version: u32, line: usize },
    #[error("transcript is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PromptSent,
    ResponseReceived,
    RetryIssued,
    MemoryUpdated,
    StatementAccepted,
    ReadinessPolled,
    BallotCast,
    BallotRevealed,
    ConfirmationCast,
    OutcomeDecided,
    PayoffCredited,
    RankingRecorded,
    SeedDrawn,
    Failure,
}

/// Who may see an event when rendering contexts from the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Shared,
    PrivateTo(String),
    Experimenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub schema_version: u32,
    pub group_id: String,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_unix_ms: Option<u64>,
    pub kind: EventKind,
    pub visibility: Visibility,
    pub payload: Value,
}

/// Collects one group's events with gap-free sequence numbers, and enforces
/// the optional backend-call budget.
pub struct EventSink {
    group_id: String,
    canonical: bool,
    next_seq: u64,
    backend_calls: u64,
    max_backend_calls: Option<u64>,
    events: Vec<TranscriptEvent>,
}

impl EventSink {
    pub fn new(group_id: impl Into<String>, canonical: bool) -> EventSink {
        EventSink {
            group_id: group_id.into(),
            canonical,
            next_seq: 1,
            backend_calls: 0,
            max_backend_calls: None,
            events: Vec::new(),
        }
    }

    pub fn with_backend_call_budget(mut self, budget: Option<u64>) -> EventSink {
        self.max_backend_calls = budget;
        self
    }

    pub fn record(&mut self, kind: EventKind, visibility: Visibility, payload: Value) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let ts_unix_ms = if self.canonical {
            None
        } else {
            Some(now_unix_ms())
        };
        self.events.push(TranscriptEvent {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            group_id: self.group_id.clone(),
            seq,
            ts_unix_ms,
            kind,
            visibility,
            payload,
        });
        seq
    }

    /// Charges one backend call against the budget; `Err` carries the limit.
    pub fn charge_backend_call(&mut self) -> Result<(), u64> {
        self.backend_calls += 1;
        match self.max_backend_calls {
            Some(limit) if self.backend_calls > limit => Err(limit),
            _ => Ok(()),
        }
    }

    pub fn backend_calls(&self) -> u64 {
        self.backend_calls
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn events(&self) -> &[TranscriptEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TranscriptEvent> {
        self.events
    }
}

fn now_unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn write_transcript(path: &Path, events: &[TranscriptEvent]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    for event in events {
        serde_json::to_writer(&mut writer, event)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

/// Reads and structurally validates one transcript: parseable lines, a
/// supported schema version, and gap-free sequence numbers starting at 1.
pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptEvent>, TranscriptError> {
    let file = std::fs::File::open(path).map_err(|source| TranscriptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut events = Vec::new();
    let mut expected_seq = 1u64;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| TranscriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let event: TranscriptEvent =
            serde_json::from_str(&line).map_err(|e| TranscriptError::Parse {
                line: line_no,
                detail: e.to_string(),
            })?;
        if event.schema_version != TRANSCRIPT_SCHEMA_VERSION {
            return Err(TranscriptError::UnsupportedVersion {
                version: event.schema_version,
                line: line_no,
            });
        }
        if event.seq != expected_seq {
            return Err(TranscriptError::Gap {
                line: line_no,
                expected: expected_seq,
                found: event.seq,
            });
        }
        expected_seq += 1;
        events.push(event);
    }
    if events.is_empty() {
        return Err(TranscriptError::Empty);
    }
    Ok(events)
}

// ---------------------------------------------------------------------------
// Typed payloads
// ---------------------------------------------------------------------------

/// Payloads of `SeedDrawn` events: every random decision is logged with its
/// provenance. The `group_seed` variant doubles as the group genesis record
/// so a transcript alone reconstructs the full group record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "purpose", rename_all = "snake_case")]
pub enum SeedDrawPayload {
    GroupSeed {
        group_index: u64,
        seed_hex: String,
        language: String,
        agents: Vec<AgentSpec>,
        application_order: Vec<String>,
        group_base: Situation,
    },
    Temperature {
        agent: String,
        regime: String,
        value: f64,
    },
    ScaleFactor {
        factor: f64,
    },
    Fallback {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        principle: Option<Principle>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        distribution: Option<String>,
    },
    SpeakingOrder {
        round: u32,
        order: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub agent: String,
    pub stage: String,
    pub phase: String,
    pub round: u32,
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_message: Option<String>,
}

impl PromptPayload {
    fn text(&self) -> String {
        let mut out = String::new();
        for part in [&self.context, &self.task, &self.retry_message].into_iter().flatten() {
            out.push_str(part);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePayload {
    pub agent: String,
    pub stage: String,
    pub attempt: u32,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPayload {
    pub agent: String,
    pub stage: String,
    pub attempt: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryUpdatedPayload {
    pub agent: String,
    pub checkpoint: String,
    pub old: String,
    pub new: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementPayload {
    pub round: u32,
    pub speaker: String,
    pub statement: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadinessPayload {
    pub round: u32,
    pub answers: BTreeMap<String, bool>,
    pub all_ready: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallotCastPayload {
    pub ballot: u32,
    pub agent: String,
    pub principle: Principle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallotRevealedPayload {
    pub ballot: u32,
    pub entries: BTreeMap<String, Principle>,
    pub unanimous_kind: Option<PrincipleKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmationCastPayload {
    pub ballot: u32,
    pub agent: String,
    pub confirm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomePayload {
    pub outcome: GroupOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffPayload {
    pub agent: String,
    /// `application` or `binding`.
    pub phase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u8>,
    pub situation: Situation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principle: Option<Principle>,
    pub selected: String,
    pub drawn_class: usize,
    pub income: f64,
    pub scale: f64,
    pub payoff: Money,
    /// The exact principle set used for the counterfactual table, so replay
    /// can recompute it.
    pub counterfactual_principles: Vec<Principle>,
    pub counterfactuals: BTreeMap<PrincipleKind, Money>,
    pub balance_after: Money,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPayload {
    pub agent: String,
    pub tag: RankingTag,
    pub ranking: Ranking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailurePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub reason: String,
}

pub fn to_payload<T: Serialize>(payload: &T) -> Value {
    serde_json::to_value(payload).expect("payload serialization is infallible")
}

pub fn parse_payload<T: for<'de> Deserialize<'de>>(event: &TranscriptEvent) -> Option<T> {
    serde_json::from_value(event.payload.clone()).ok()
}

// ---------------------------------------------------------------------------
// Transcript linter
// ---------------------------------------------------------------------------

/// Digs the genesis record out of a transcript.
pub fn genesis_of(events: &[TranscriptEvent]) -> Option<SeedDrawPayload> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::SeedDrawn)
        .filter_map(parse_payload::<SeedDrawPayload>)
        .find(|p| matches!(p, SeedDrawPayload::GroupSeed { .. }))
}

/// Checks protocol hygiene over a full transcript:
///
/// - equal speaking opportunity (one statement per agent per round),
/// - ballot and readiness secrecy (no current-stage answer of another agent
///   inside an elicitation context),
/// - privacy discipline (private assessments and memory never reach another
///   agent's prompt),
/// - phase gating (no participant names or history leaks into phase-1
///   prompts; no class-probability values inside application-round prompts),
/// - ballot structure (casts stay private, reveals precede confirmations,
///   one cast per member).
///
/// Returns human-readable findings; an empty vector means clean.
pub fn lint_transcript(
    events: &[TranscriptEvent],
    probability_tokens: &[String],
) -> Vec<String> {
    let mut issues = Vec::new();
    let Some(SeedDrawPayload::GroupSeed { agents, .. }) = genesis_of(events) else {
        return vec!["transcript has no group genesis event".to_string()];
    };
    let agent_names: Vec<String> = agents.iter().map(|a| a.name.clone()).collect();
    let aborted = events.iter().any(|e| e.kind == EventKind::Failure);

    // Equal opportunity: one statement per agent per completed round.
    let mut statements_by_round: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for event in events.iter().filter(|e| e.kind == EventKind::StatementAccepted) {
        if let Some(p) = parse_payload::<StatementPayload>(event) {
            statements_by_round.entry(p.round).or_default().push(p.speaker);
        }
    }
    let max_round = statements_by_round.keys().max().copied().unwrap_or(0);
    for (round, speakers) in &statements_by_round {
        if aborted && *round == max_round {
            continue;
        }
        for name in &agent_names {
            let count = speakers.iter().filter(|s| *s == name).count();
            if count != 1 {
                issues.push(format!(
                    "round {round}: agent {name} spoke {count} times (expected exactly 1)"
                ));
            }
        }
    }

    // Ballot structure.
    let mut casts_by_ballot: BTreeMap<u32, BTreeSet<String>> = BTreeMap::new();
    let mut reveal_seq_by_ballot: BTreeMap<u32, u64> = BTreeMap::new();
    for event in events {
        match event.kind {
            EventKind::BallotCast => {
                if let Some(p) = parse_payload::<BallotCastPayload>(event) {
                    if event.visibility != Visibility::PrivateTo(p.agent.clone()) {
                        issues.push(format!(
                            "ballot {} cast by {} is not private to the voter",
                            p.ballot, p.agent
                        ));
                    }
                    casts_by_ballot.entry(p.ballot).or_default().insert(p.agent);
                }
            }
            EventKind::BallotRevealed => {
                if let Some(p) = parse_payload::<BallotRevealedPayload>(event) {
                    reveal_seq_by_ballot.entry(p.ballot).or_insert(event.seq);
                }
            }
            EventKind::ConfirmationCast => {
                if let Some(p) = parse_payload::<ConfirmationCastPayload>(event) {
                    match reveal_seq_by_ballot.get(&p.ballot) {
                        Some(reveal_seq) if *reveal_seq < event.seq => {}
                        _ => issues.push(format!(
                            "ballot {}: confirmation by {} precedes the reveal",
                            p.ballot, p.agent
                        )),
                    }
                }
            }
            _ => {}
        }
    }
    for (ballot, casters) in &casts_by_ballot {
        if !aborted && casters.len() != agent_names.len() {
            issues.push(format!(
                "ballot {ballot}: {} casts for {} members",
                casters.len(),
                agent_names.len()
            ));
        }
    }

    // Secrecy and privacy: walk events in order, tracking what is currently
    // secret, and scan each prompt for leaked content.
    let mut pending_votes: Vec<(String, String)> = Vec::new();
    let mut pending_readiness: Vec<(String, String)> = Vec::new();
    let mut private_texts: Vec<(String, String)> = Vec::new();
    for event in events {
        match event.kind {
            EventKind::ResponseReceived => {
                if let Some(p) = parse_payload::<ResponsePayload>(event) {
                    match p.stage.as_str() {
                        "ballot_vote" => pending_votes.push((p.agent, p.raw)),
                        "readiness" => pending_readiness.push((p.agent, p.raw)),
                        "private_assessment" | "memory_update" => {
                            if let Some(inner) = inner_text(&p.raw) {
                                private_texts.push((p.agent.clone(), inner));
                            }
                            private_texts.push((p.agent, p.raw));
                        }
                        _ => {}
                    }
                }
            }
            EventKind::BallotRevealed => pending_votes.clear(),
            EventKind::ReadinessPolled => pending_readiness.clear(),
            EventKind::PromptSent => {
                let Some(p) = parse_payload::<PromptPayload>(event) else {
                    continue;
                };
                let text = p.text();
                for (owner, needle) in pending_votes.iter().chain(&pending_readiness) {
                    if *owner != p.agent && needle.len() >= 12 && text.contains(needle.as_str()) {
                        issues.push(format!(
                            "prompt to {} at {} leaks {}'s secret current-stage answer",
                            p.agent, p.stage, owner
                        ));
                    }
                }
                for (owner, needle) in &private_texts {
                    if *owner != p.agent && needle.len() >= 12 && text.contains(needle.as_str()) {
                        issues.push(format!(
                            "prompt to {} at {} contains {}'s private content",
                            p.agent, p.stage, owner
                        ));
                    }
                }
                if p.phase == "individual" {
                    for name in &agent_names {
                        if *name != p.agent && text.contains(name.as_str()) {
                            issues.push(format!(
                                "phase-1 prompt to {} at {} names other participant {}",
                                p.agent, p.stage, name
                            ));
                        }
                    }
                }
                if p.stage == "application_choice" {
                    for token in probability_tokens {
                        if contains_numeric_token(&text, token) {
                            issues.push(format!(
                                "application-round prompt to {} contains probability value {}",
                                p.agent, token
                            ));
                        }
                    }
                }
            }
            _ => {}
        }
    }

    issues
}

/// Substring search with digit boundaries, so a probability token like
/// `0.5` does not match inside a currency amount like `10.50`.
fn contains_numeric_token(text: &str, token: &str) -> bool {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(at) = text[from..].find(token) {
        let start = from + at;
        let end = start + token.len();
        let before_digit = start > 0 && bytes[start - 1].is_ascii_digit();
        let after_digit = end < bytes.len() && bytes[end].is_ascii_digit();
        if !before_digit && !after_digit {
            return true;
        }
        from = start + 1;
    }
    false
}

/// Extracts the single string field of a simple `{"key": "text"}` response.
fn inner_text(raw: &str) -> Option<String> {
    let value: Value = serde_json::from_str(raw.trim()).ok()?;
    let object = value.as_object()?;
    if object.len() == 1 {
        object.values().next()?.as_str().map(str::to_string)
    } else {
        None
    }
}

/// Builds the probability strings the linter must not find in
/// application-round prompts (both percent and fractional renderings).
pub fn probability_tokens(probs: &[f64]) -> Vec<String> {
    let mut tokens = Vec::new();
    for p in probs {
        tokens.push(format!("{}%", crate::domain::fmt_amount(p * 100.0)));
        tokens.push(format!("{p}"));
    }
    tokens.sort();
    tokens.dedup();
    tokens
}
