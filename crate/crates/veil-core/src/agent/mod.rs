//! Agent abstraction: personas, character-limited memory, structured
//! response elicitation with validation and retry, plus the pluggable
//! backends (HTTP chat completion for real models, scripted policies as
//! deterministic protocol oracles).

pub mod backend;
pub mod elicit;
pub mod schema;
pub mod scripted;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backend::{Backend, BackendConfig, BackendError, BackendRequest, ChatMessage, Feedback};
pub use elicit::{ElicitError, Elicitor, RetryTexts};
pub use schema::{ParsedResponse, Ranking, ResponseSchema, SchemaViolation};
pub use scripted::{ConfirmStyle, ScriptedBackend, ScriptedPolicy, ScriptedProfile};

/// Persona and binding for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub role_description: String,
    pub language: String,
    pub temperature: f64,
    /// Identifier of the backend binding that answers for this agent.
    pub backend: String,
    /// Private memory budget in characters.
    pub memory_limit: usize,
}

/// The three sampling-randomness conditions an experiment can run under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemperatureRegime {
    Zero,
    #[serde(rename = "0-1")]
    UpToOne,
    #[serde(rename = "0-1.5")]
    UpToOneAndHalf,
}

impl TemperatureRegime {
    pub const ALL: [TemperatureRegime; 3] = [
        TemperatureRegime::Zero,
        TemperatureRegime::UpToOne,
        TemperatureRegime::UpToOneAndHalf,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TemperatureRegime::Zero => "zero",
            TemperatureRegime::UpToOne => "0-1",
            TemperatureRegime::UpToOneAndHalf => "0-1.5",
        }
    }

    pub fn from_id(id: &str) -> Option<TemperatureRegime> {
        TemperatureRegime::ALL.into_iter().find(|r| r.id() == id)
    }

    pub fn bounds(self) -> (f64, f64) {
        match self {
            TemperatureRegime::Zero => (0.0, 0.0),
            TemperatureRegime::UpToOne => (0.0, 1.0),
            TemperatureRegime::UpToOneAndHalf => (0.0, 1.5),
        }
    }

    pub fn contains(self, temperature: f64) -> bool {
        let (lo, hi) = self.bounds();
        (lo..=hi).contains(&temperature)
    }

    /// Draws one temperature for an agent; fixed for the whole run.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            TemperatureRegime::Zero => 0.0,
            _ => {
                let (lo, hi) = self.bounds();
                rng.random_range(lo..=hi)
            }
        }
    }
}

/// Agent-managed private memory with a hard character limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    content: String,
    limit: usize,
}

impl MemoryBuffer {
    pub fn new(limit: usize) -> MemoryBuffer {
        assert!(limit > 0, "memory limit must be positive");
        MemoryBuffer {
            content: String::new(),
            limit,
        }
    }

    pub fn content(&self) -> &str {
        &self.content
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn char_len(&self) -> usize {
        self.content.chars().count()
    }
}

/// Replaces the buffer content with the agent's own submission, truncated to
/// the character limit. The caller records the displaced content.
pub fn update_memory(buf: &MemoryBuffer, new_content: &str) -> MemoryBuffer {
    let content = if new_content.chars().count() > buf.limit {
        new_content.chars().take(buf.limit).collect()
    } else {
        new_content.to_string()
    };
    MemoryBuffer {
        content,
        limit: buf.limit,
    }
}

/// Classification returned by statement validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatementCheck {
    Ok,
    TooShort { length: usize },
}

/// A statement passes when its trimmed length reaches `min_length` characters.
pub fn validate_statement(text: &str, min_length: usize) -> StatementCheck {
    assert!(min_length >= 1, "minimum statement length must be >= 1");
    let length = text.trim().chars().count();
    if length >= min_length {
        StatementCheck::Ok
    } else {
        StatementCheck::TooShort { length }
    }
}

/// One statement in the shared discussion history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u32,
    pub speaker: String,
    pub text: String,
}

/// Which half of the experiment an elicitation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Individual,
    Group,
}

impl Phase {
    pub fn key(self) -> &'static str {
        match self {
            Phase::Individual => "individual",
            Phase::Group => "group",
        }
    }
}

/// Protocol stage an elicitation belongs to. Doubles as the task-template
/// key and as the stage tag recorded in transcript events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RankingInitial,
    RankingInformed,
    ApplicationChoice,
    RankingFinalIndividual,
    PrivateAssessment,
    Statement,
    Readiness,
    BallotVote,
    BallotConfirm,
    MemoryUpdate,
    RankingPostGroup,
}

impl Stage {
    pub fn key(self) -> &'static str {
        match self {
            Stage::RankingInitial => "ranking_initial",
            Stage::RankingInformed => "ranking_informed",
            Stage::ApplicationChoice => "application_choice",
            Stage::RankingFinalIndividual => "ranking_final_individual",
            Stage::PrivateAssessment => "private_assessment",
            Stage::Statement => "statement",
            Stage::Readiness => "readiness",
            Stage::BallotVote => "ballot_vote",
            Stage::BallotConfirm => "ballot_confirm",
            Stage::MemoryUpdate => "memory_update",
            Stage::RankingPostGroup => "ranking_post_group",
        }
    }
}

/// A revealed first-stage ballot entry shown during confirmation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealedVote {
    pub agent: String,
    pub principle: crate::domain::Principle,
}

/// Structured snapshot of what the protocol exposes to a backend for one
/// elicitation. HTTP backends only read the rendered messages; scripted
/// policies act on these fields.
#[derive(Debug, Clone, Serialize)]
pub struct Observation {
    pub stage: Stage,
    pub phase: Phase,
    /// Deliberation round or application round; 0 where not applicable.
    pub round: u32,
    pub history: Vec<HistoryEntry>,
    /// Populated only during ballot confirmation.
    pub revealed_votes: Vec<RevealedVote>,
    pub min_statement_chars: usize,
}

impl Observation {
    pub fn new(stage: Stage) -> Observation {
        Observation {
            stage,
            phase: Phase::Individual,
            round: 0,
            history: Vec::new(),
            revealed_votes: Vec::new(),
            min_statement_chars: 0,
        }
    }

    pub fn with_phase(mut self, phase: Phase) -> Observation {
        self.phase = phase;
        self
    }

    pub fn with_round(mut self, round: u32) -> Observation {
        self.round = round;
        self
    }

    pub fn with_history(mut self, history: Vec<HistoryEntry>) -> Observation {
        self.history = history;
        self
    }

    pub fn with_revealed(mut self, votes: Vec<RevealedVote>) -> Observation {
        self.revealed_votes = votes;
        self
    }

    pub fn with_min_statement(mut self, chars: usize) -> Observation {
        self.min_statement_chars = chars;
        self
    }
}
