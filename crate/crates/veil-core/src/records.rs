//! Completed experiment records: what a finished group run leaves behind.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentSpec, HistoryEntry, Ranking};
use crate::deliberation::GroupOutcome;
use crate::domain::{BankBalance, PayoffOutcome};

/// Which of the four rankings an entry belongs to: before instruction,
/// after instruction, after the application rounds, and after deliberation.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum RankingTag {
    R1,
    R2,
    R3,
    R4,
}

impl RankingTag {
    pub const ALL: [RankingTag; 4] = [
        RankingTag::R1,
        RankingTag::R2,
        RankingTag::R3,
        RankingTag::R4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RankingTag::R1 => "R1",
            RankingTag::R2 => "R2",
            RankingTag::R3 => "R3",
            RankingTag::R4 => "R4",
        }
    }
}

impl fmt::Display for RankingTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One payoff-relevant application round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationRound {
    pub round: u8,
    pub situation: String,
    pub outcome: PayoffOutcome,
}

/// One agent's individual phase: three rankings, four application rounds,
/// and the resulting balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub agent: String,
    pub rankings: BTreeMap<RankingTag, Ranking>,
    pub application_rounds: Vec<ApplicationRound>,
    pub balance: BankBalance,
}

/// Everything produced by one five-agent group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_id: String,
    pub group_index: u64,
    pub seed_hex: String,
    pub language: String,
    pub agents: Vec<AgentSpec>,
    pub temperatures: BTreeMap<String, f64>,
    pub individuals: Vec<IndividualRecord>,
    pub statements: Vec<HistoryEntry>,
    pub outcome: GroupOutcome,
    pub scale_factor: f64,
    pub binding_situation: String,
    pub binding_payoffs: BTreeMap<String, PayoffOutcome>,
    pub final_rankings: BTreeMap<String, Ranking>,
}

impl GroupRecord {
    /// Looks up one agent's ranking by tag (R1-R3 from the individual
    /// record, R4 from the post-deliberation set).
    pub fn ranking(&self, agent: &str, tag: RankingTag) -> Option<&Ranking> {
        match tag {
            RankingTag::R4 => self.final_rankings.get(agent),
            _ => self
                .individuals
                .iter()
                .find(|i| i.agent == agent)
                .and_then(|i| i.rankings.get(&tag)),
        }
    }

    pub fn agent_names(&self) -> Vec<&str> {
        self.agents.iter().map(|a| a.name.as_str()).collect()
    }
}
