//! Structured response schemas and the parsing/validation that turns raw
//! backend output into protocol values.
//!
//! Parsing is lenient about wrapping (code fences, prose around the JSON)
//! and strict about content: a response that violates its schema is reported
//! with enough detail to re-prompt the agent.

use serde::Deserialize;
use thiserror::Error;

use crate::domain::{
    fmt_amount, validate_constraint, ConstraintCheck, Principle, PrincipleKind, Situation,
};

use super::{validate_statement, StatementCheck};

/// What shape of answer an elicitation expects, plus the data needed to
/// validate it.
#[derive(Debug, Clone)]
pub enum ResponseSchema {
    /// Permutation of the four principle kinds plus a 1-5 confidence.
    Ranking,
    /// One principle, with a constraint value iff the kind requires one,
    /// validated for feasibility against the given situation.
    PrincipleChoice { situation: Situation },
    /// Free text subject to a minimum trimmed length.
    Statement { min_chars: usize },
    Readiness,
    /// Same payload as `PrincipleChoice`; tagged separately so transcripts
    /// distinguish ballots from application-round choices.
    Ballot { situation: Situation },
    Confirmation,
    MemoryUpdate,
    PrivateAssessment,
}

impl ResponseSchema {
    /// Key used for schema-instruction template lookup and event tagging.
    pub fn kind_key(&self) -> &'static str {
        match self {
            ResponseSchema::Ranking => "ranking",
            ResponseSchema::PrincipleChoice { .. } => "principle_choice",
            ResponseSchema::Statement { .. } => "statement",
            ResponseSchema::Readiness => "readiness",
            ResponseSchema::Ballot { .. } => "ballot",
            ResponseSchema::Confirmation => "confirmation",
            ResponseSchema::MemoryUpdate => "memory_update",
            ResponseSchema::PrivateAssessment => "private_assessment",
        }
    }

    pub fn parse(&self, raw: &str) -> Result<ParsedResponse, SchemaViolation> {
        let json = extract_json(raw)?;
        match self {
            ResponseSchema::Ranking => parse_ranking(json).map(ParsedResponse::Ranking),
            ResponseSchema::PrincipleChoice { situation } | ResponseSchema::Ballot { situation } => {
                parse_choice(json, situation).map(ParsedResponse::Choice)
            }
            ResponseSchema::Statement { min_chars } => {
                let text: String = field(json, "statement")?;
                match validate_statement(&text, (*min_chars).max(1)) {
                    StatementCheck::Ok => Ok(ParsedResponse::Statement(text)),
                    StatementCheck::TooShort { length } => Err(SchemaViolation::TooShort {
                        length,
                        min: *min_chars,
                    }),
                }
            }
            ResponseSchema::Readiness => field(json, "ready").map(ParsedResponse::Readiness),
            ResponseSchema::Confirmation => {
                field(json, "confirm").map(ParsedResponse::Confirmation)
            }
            ResponseSchema::MemoryUpdate => {
                field(json, "memory").map(ParsedResponse::MemoryUpdate)
            }
            ResponseSchema::PrivateAssessment => {
                field(json, "assessment").map(ParsedResponse::PrivateAssessment)
            }
        }
    }
}

/// Validated response value, one variant per schema family.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedResponse {
    Ranking(Ranking),
    Choice(Principle),
    Statement(String),
    Readiness(bool),
    Confirmation(bool),
    MemoryUpdate(String),
    PrivateAssessment(String),
}

impl ParsedResponse {
    pub fn into_ranking(self) -> Ranking {
        match self {
            ParsedResponse::Ranking(r) => r,
            other => panic!("expected ranking, got {other:?}"),
        }
    }

    pub fn into_choice(self) -> Principle {
        match self {
            ParsedResponse::Choice(p) => p,
            other => panic!("expected principle choice, got {other:?}"),
        }
    }

    pub fn into_text(self) -> String {
        match self {
            ParsedResponse::Statement(t)
            | ParsedResponse::MemoryUpdate(t)
            | ParsedResponse::PrivateAssessment(t) => t,
            other => panic!("expected text response, got {other:?}"),
        }
    }

    pub fn into_bool(self) -> bool {
        match self {
            ParsedResponse::Readiness(b) | ParsedResponse::Confirmation(b) => b,
            other => panic!("expected boolean response, got {other:?}"),
        }
    }
}

/// Strict preference order over the four principles plus confidence (1-5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Ranking {
    pub order: [PrincipleKind; 4],
    pub confidence: u8,
}

impl Ranking {
    pub fn top(&self) -> PrincipleKind {
        self.order[0]
    }
}

/// Ways a raw response can fail its schema; each carries what the retry
/// prompt needs to explain.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SchemaViolation {
    #[error("response is not valid JSON: {detail}")]
    Json { detail: String },
    #[error("response violates the expected structure: {detail}")]
    Structural { detail: String },
    #[error("statement has {length} characters, minimum is {min}")]
    TooShort { length: usize, min: usize },
    #[error("constraint {constraint} is infeasible: {message}")]
    ConstraintViolation {
        constraint: f64,
        achievable: f64,
        message: String,
    },
}

/// Pulls the JSON object out of a possibly fenced or prose-wrapped reply.
fn extract_json(raw: &str) -> Result<&str, SchemaViolation> {
    let start = raw.find('{').ok_or_else(|| SchemaViolation::Json {
        detail: "no JSON object found".into(),
    })?;
    let end = raw.rfind('}').ok_or_else(|| SchemaViolation::Json {
        detail: "unterminated JSON object".into(),
    })?;
    if end < start {
        return Err(SchemaViolation::Json {
            detail: "unterminated JSON object".into(),
        });
    }
    Ok(&raw[start..=end])
}

fn field<T: for<'de> Deserialize<'de>>(json: &str, name: &str) -> Result<T, SchemaViolation> {
    let value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| SchemaViolation::Json {
            detail: e.to_string(),
        })?;
    let field = value
        .get(name)
        .cloned()
        .ok_or_else(|| SchemaViolation::Structural {
            detail: format!("missing field `{name}`"),
        })?;
    serde_json::from_value(field).map_err(|e| SchemaViolation::Structural {
        detail: format!("field `{name}`: {e}"),
    })
}

fn parse_ranking(json: &str) -> Result<Ranking, SchemaViolation> {
    let ids: Vec<String> = field(json, "ranking")?;
    let confidence: u8 = field(json, "confidence")?;
    if ids.len() != 4 {
        return Err(SchemaViolation::Structural {
            detail: format!("ranking must list exactly 4 principles, got {}", ids.len()),
        });
    }
    let mut order = [PrincipleKind::MaxFloor; 4];
    for (i, id) in ids.iter().enumerate() {
        order[i] = PrincipleKind::from_id(id).ok_or_else(|| SchemaViolation::Structural {
            detail: format!("unknown principle `{id}`"),
        })?;
    }
    for kind in PrincipleKind::ALL {
        if !order.contains(&kind) {
            return Err(SchemaViolation::Structural {
                detail: format!("ranking must be a permutation; `{}` is missing", kind.id()),
            });
        }
    }
    if !(1..=5).contains(&confidence) {
        return Err(SchemaViolation::Structural {
            detail: format!("confidence must be between 1 and 5, got {confidence}"),
        });
    }
    Ok(Ranking { order, confidence })
}

fn parse_choice(json: &str, situation: &Situation) -> Result<Principle, SchemaViolation> {
    let id: String = field(json, "principle")?;
    let kind = PrincipleKind::from_id(&id).ok_or_else(|| SchemaViolation::Structural {
        detail: format!("unknown principle `{id}`"),
    })?;
    let constraint: Option<f64> = match field::<serde_json::Value>(json, "constraint") {
        Ok(v) if v.is_null() => None,
        Ok(v) => Some(v.as_f64().ok_or_else(|| SchemaViolation::Structural {
            detail: "constraint must be a number".into(),
        })?),
        Err(SchemaViolation::Structural { detail }) if detail.contains("missing field") => None,
        Err(e) => return Err(e),
    };
    let principle = Principle::new(kind, constraint).map_err(|e| SchemaViolation::Structural {
        detail: e.to_string(),
    })?;
    if kind.requires_constraint() {
        match validate_constraint(&principle, situation) {
            Ok(ConstraintCheck::Ok) => {}
            Ok(ConstraintCheck::Violation {
                achievable,
                message,
            }) => {
                return Err(SchemaViolation::ConstraintViolation {
                    constraint: principle.constraint().unwrap_or_default(),
                    achievable,
                    message,
                })
            }
            Err(e) => {
                return Err(SchemaViolation::Structural {
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok(principle)
}

/// Renders a revealed vote list for the confirmation prompt.
pub fn render_votes(votes: &[super::RevealedVote]) -> String {
    votes
        .iter()
        .map(|v| match v.principle.constraint() {
            Some(c) => format!(
                "{}: {} ({})",
                v.agent,
                v.principle.kind().id(),
                fmt_amount(c)
            ),
            None => format!("{}: {}", v.agent, v.principle.kind().id()),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClassProbabilities, IncomeDistribution};
    use std::collections::BTreeMap;

    fn situation() -> Situation {
        Situation::new(
            "S",
            vec![
                IncomeDistribution::new("D1", [10_000.0, 15_000.0, 20_000.0, 25_000.0, 30_000.0])
                    .unwrap(),
                IncomeDistribution::new("D2", [5_000.0, 20_000.0, 30_000.0, 40_000.0, 50_000.0])
                    .unwrap(),
            ],
            ClassProbabilities::default(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn parses_fenced_ranking() {
        let raw = "```json\n{\"ranking\": [\"max_avg_with_floor\", \"max_floor\", \"max_average\", \"max_avg_with_range\"], \"confidence\": 4}\n```";
        let parsed = ResponseSchema::Ranking.parse(raw).unwrap().into_ranking();
        assert_eq!(parsed.top(), PrincipleKind::MaxAvgWithFloor);
        assert_eq!(parsed.confidence, 4);
    }

    #[test]
    fn rejects_duplicate_ranking() {
        let raw = r#"{"ranking": ["max_floor", "max_floor", "max_average", "max_avg_with_range"], "confidence": 3}"#;
        let err = ResponseSchema::Ranking.parse(raw).unwrap_err();
        assert!(matches!(err, SchemaViolation::Structural { .. }));
    }

    #[test]
    fn rejects_out_of_range_confidence() {
        let raw = r#"{"ranking": ["max_floor", "max_average", "max_avg_with_floor", "max_avg_with_range"], "confidence": 6}"#;
        assert!(ResponseSchema::Ranking.parse(raw).is_err());
    }

    #[test]
    fn choice_requires_constraint_when_kind_does() {
        let schema = ResponseSchema::PrincipleChoice {
            situation: situation(),
        };
        let err = schema
            .parse(r#"{"principle": "max_avg_with_floor"}"#)
            .unwrap_err();
        assert!(matches!(err, SchemaViolation::Structural { .. }));
        let ok = schema
            .parse(r#"{"principle": "max_avg_with_floor", "constraint": 8000}"#)
            .unwrap()
            .into_choice();
        assert_eq!(ok.kind(), PrincipleKind::MaxAvgWithFloor);
    }

    #[test]
    fn infeasible_ballot_reports_achievable_bound() {
        let schema = ResponseSchema::Ballot {
            situation: situation(),
        };
        let err = schema
            .parse(r#"{"principle": "max_avg_with_floor", "constraint": 99000}"#)
            .unwrap_err();
        match err {
            SchemaViolation::ConstraintViolation {
                achievable,
                message,
                ..
            } => {
                assert_eq!(achievable, 10_000.0);
                assert_eq!(message, "max achievable floor = 10000");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn statement_length_enforced_in_chars() {
        let schema = ResponseSchema::Statement { min_chars: 5 };
        assert!(schema.parse(r#"{"statement": "嗯嗯嗯嗯嗯"}"#).is_ok());
        assert!(matches!(
            schema.parse(r#"{"statement": "嗯嗯"}"#),
            Err(SchemaViolation::TooShort { length: 2, min: 5 })
        ));
    }

    #[test]
    fn boolean_schemas_parse() {
        assert_eq!(
            ResponseSchema::Readiness
                .parse(r#"{"ready": true}"#)
                .unwrap(),
            ParsedResponse::Readiness(true)
        );
        assert_eq!(
            ResponseSchema::Confirmation
                .parse(r#"{"confirm": false}"#)
                .unwrap(),
            ParsedResponse::Confirmation(false)
        );
    }

    #[test]
    fn garbage_is_a_json_violation() {
        assert!(matches!(
            ResponseSchema::Readiness.parse("not json at all"),
            Err(SchemaViolation::Json { .. })
        ));
    }

    proptest::proptest! {
        /// Whatever bytes a backend produces, an accepted response always
        /// satisfies its schema invariants.
        #[test]
        fn accepted_responses_satisfy_their_schema(raw in ".{0,200}") {
            if let Ok(ParsedResponse::Ranking(r)) = ResponseSchema::Ranking.parse(&raw) {
                let mut kinds: Vec<_> = r.order.to_vec();
                kinds.sort();
                kinds.dedup();
                proptest::prop_assert_eq!(kinds.len(), 4);
                proptest::prop_assert!((1..=5).contains(&r.confidence));
            }
            let schema = ResponseSchema::Ballot { situation: situation() };
            if let Ok(ParsedResponse::Choice(p)) = schema.parse(&raw) {
                proptest::prop_assert_eq!(
                    p.constraint().is_some(),
                    p.kind().requires_constraint()
                );
                if p.kind().requires_constraint() {
                    proptest::prop_assert!(crate::domain::validate_constraint(&p, &situation())
                        .unwrap()
                        .is_ok());
                }
            }
            let min = ResponseSchema::Statement { min_chars: 10 };
            if let Ok(ParsedResponse::Statement(text)) = min.parse(&raw) {
                proptest::prop_assert!(text.trim().chars().count() >= 10);
            }
        }
    }
}
